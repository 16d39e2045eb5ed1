"""Planar and raster primitives: polygon math, rasterization, overlap
measures, connected components, binary morphology, contour tracing and
polygon simplification.

Conventions used throughout:

* Boxes follow the COCO convention ``[x, y, w, h]`` with the origin at the
  top-left corner of the image.
* Masks are ``numpy`` boolean arrays of shape ``(height, width)``; pixel
  ``(row i, col j)`` covers the unit square ``[j, j+1] x [i, i+1]`` and its
  center sits at ``(j + 0.5, i + 0.5)``.
* A pixel is inside a polygon iff its center is inside under the even-odd
  rule; a center exactly on a boundary crossing counts edges strictly to
  its left.  This rule is the single source of truth for every
  polygon-based overlap measure in the package.

All functions are pure and safe to call from parallel workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateRingError, DimensionMismatchError, EmptyMaskError

Ring = Sequence[float]  # flat vertex list [x1, y1, x2, y2, ...]

_STRUCT_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCT_8 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, COCO ``[x, y, w, h]`` convention."""

    x: float
    y: float
    w: float
    h: float

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class PolygonSet:
    """One or more polygon rings; the region is the union of the rings."""

    rings: tuple[tuple[float, ...], ...]

    @classmethod
    def from_lists(cls, rings: Iterable[Ring]) -> "PolygonSet":
        return cls(tuple(tuple(float(v) for v in ring) for ring in rings))

    def as_lists(self) -> list[list[float]]:
        return [list(ring) for ring in self.rings]


def _ring_points(ring: Ring) -> list[tuple[float, float]]:
    if len(ring) < 6 or len(ring) % 2 != 0:
        raise DegenerateRingError(
            f"ring needs at least 3 (x, y) vertices, got {len(ring)} coordinates"
        )
    return [(float(ring[i]), float(ring[i + 1])) for i in range(0, len(ring), 2)]


def polygon_area(ring: Ring) -> float:
    """Unsigned shoelace area of one ring (orientation independent)."""
    pts = _ring_points(ring)
    acc = 0.0
    for (x1, y1), (x2, y2) in zip(pts, pts[1:] + pts[:1]):
        acc += x1 * y2 - x2 * y1
    return abs(acc) / 2.0


def ring_perimeter(ring: Ring) -> float:
    pts = _ring_points(ring)
    return sum(
        math.hypot(x2 - x1, y2 - y1)
        for (x1, y1), (x2, y2) in zip(pts, pts[1:] + pts[:1])
    )


def polygon_to_bbox(poly: PolygonSet) -> BBox:
    """Tight axis-aligned hull over the vertices of all rings."""
    xs: list[float] = []
    ys: list[float] = []
    for ring in poly.rings:
        for x, y in _ring_points(ring):
            xs.append(x)
            ys.append(y)
    if not xs:
        raise DegenerateRingError("polygon has no rings")
    w = max(xs) - min(xs)
    h = max(ys) - min(ys)
    if w <= 0 or h <= 0:
        raise DegenerateRingError("polygon hull has zero extent")
    return BBox(min(xs), min(ys), w, h)


def _rasterize_ring(ring: Ring, width: int, height: int) -> np.ndarray:
    pts = _ring_points(ring)
    # Parity-flip accumulator: a crossing at x toggles every pixel whose
    # center lies strictly to the right of it.
    flips = np.zeros((height, width + 1), dtype=np.int64)
    n = len(pts)
    for k in range(n):
        x1, y1 = pts[k]
        x2, y2 = pts[(k + 1) % n]
        if y1 == y2:
            continue
        ymin, ymax = (y1, y2) if y1 < y2 else (y2, y1)
        i0 = max(0, math.ceil(ymin - 0.5))
        i1 = min(height - 1, math.ceil(ymax - 0.5) - 1)
        if i0 > i1:
            continue
        rows = np.arange(i0, i1 + 1)
        yc = rows + 0.5
        xc = x1 + (yc - y1) * (x2 - x1) / (y2 - y1)
        # clamp before the int conversion so far-away crossings cannot overflow
        np.clip(xc, -1.0, width + 1.0, out=xc)
        cols = np.floor(xc - 0.5).astype(np.int64) + 1
        np.clip(cols, 0, width, out=cols)
        np.add.at(flips, (rows, cols), 1)
    return (np.cumsum(flips[:, :width], axis=1) % 2).astype(bool)


def rasterize(poly: PolygonSet, width: int, height: int) -> np.ndarray:
    """Rasterize a polygon set onto a ``height x width`` grid.

    A pixel is set iff its center is inside at least one ring under the
    even-odd rule; geometry outside the grid is clipped.
    """
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be >= 1")
    out = np.zeros((height, width), dtype=bool)
    for ring in poly.rings:
        out |= _rasterize_ring(ring, width, height)
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Pixel-count IoU of two equally shaped masks; 0.0 when both empty."""
    if a.shape != b.shape:
        raise DimensionMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    inter = int(np.logical_and(a, b).sum())
    return inter / union


def box_iou(a: BBox, b: BBox) -> float:
    """Analytic IoU on real coordinates."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def box_ioa(a: BBox, b: BBox) -> float:
    """Intersection over the area of ``b`` (containment of b inside a)."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    if b.area <= 0:
        return 0.0
    return (iw * ih) / b.area


def connected_components(mask: np.ndarray, connectivity: int = 8) -> list[np.ndarray]:
    """Split the foreground into connected components.

    Returns one boolean mask per component, sorted by descending pixel
    area; ties broken by the (row, col) of the first set pixel in
    row-major scan order, so the output order is fully deterministic.
    """
    if connectivity == 8:
        structure = _STRUCT_8
    elif connectivity == 4:
        structure = _STRUCT_4
    else:
        raise ValueError("connectivity must be 4 or 8")
    labels, count = ndimage.label(mask, structure=structure)
    comps = []
    for lab in range(1, count + 1):
        comp = labels == lab
        area = int(comp.sum())
        first = int(np.argmax(comp.ravel()))
        comps.append((-area, divmod(first, mask.shape[1]), comp))
    comps.sort(key=lambda item: (item[0], item[1]))
    return [comp for _, _, comp in comps]


def morphology(mask: np.ndarray, op: str, size: int = 5, iterations: int = 1) -> np.ndarray:
    """Binary opening or closing with a square ``size x size`` element.

    Out-of-grid pixels are background for both erosion and dilation
    (no border replication).  ``iterations`` repeats the first stage
    ``n`` times and then the second stage ``n`` times, matching the
    usual image-library semantics.
    """
    if op not in ("open", "close"):
        raise ValueError(f"op must be 'open' or 'close', got {op!r}")
    if size < 1 or size % 2 == 0:
        raise ValueError("structuring element size must be odd and >= 1")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    structure = np.ones((size, size), dtype=bool)
    if op == "open":
        out = ndimage.binary_erosion(mask, structure, iterations=iterations, border_value=0)
        out = ndimage.binary_dilation(out, structure, iterations=iterations, border_value=0)
    else:
        out = ndimage.binary_dilation(mask, structure, iterations=iterations, border_value=0)
        out = ndimage.binary_erosion(out, structure, iterations=iterations, border_value=0)
    return out.astype(bool)


def _trace_outer_ring(comp: np.ndarray) -> tuple[float, ...]:
    """Trace the outer boundary of one component along pixel corners.

    Starts at the top-left corner of the first set pixel in scan order
    and walks with the foreground on the right-hand side, emitting a
    vertex at every turn.  Rasterizing the resulting ring reproduces
    the component's hole-filled silhouette exactly.
    """
    h, w = comp.shape
    first = int(np.argmax(comp.ravel()))
    r0, c0 = divmod(first, w)

    def fg(r: int, c: int) -> bool:
        return 0 <= r < h and 0 <= c < w and bool(comp[r, c])

    start = (c0, r0)
    x, y = start
    dx, dy = 1, 0  # heading right along the top edge of the start pixel
    verts: list[tuple[int, int]] = [start]
    while True:
        x += dx
        y += dy
        if (x, y) == start:
            break
        if (dx, dy) == (1, 0):
            left, right = fg(y - 1, x), fg(y, x)
        elif (dx, dy) == (0, 1):
            left, right = fg(y, x), fg(y, x - 1)
        elif (dx, dy) == (-1, 0):
            left, right = fg(y, x - 1), fg(y - 1, x - 1)
        else:
            left, right = fg(y - 1, x - 1), fg(y - 1, x)
        if left:
            ndx, ndy = dy, -dx
        elif right:
            ndx, ndy = dx, dy
        else:
            ndx, ndy = -dy, dx
        if (ndx, ndy) != (dx, dy):
            verts.append((x, y))
        dx, dy = ndx, ndy
    flat: list[float] = []
    for vx, vy in verts:
        flat.extend((float(vx), float(vy)))
    return tuple(flat)


def trace_largest_contour(mask: np.ndarray) -> PolygonSet:
    """Outer boundary polygon of the largest connected component.

    Interior holes are enclosed by the ring, so re-rasterizing yields
    the filled silhouette of that component.
    """
    if not mask.any():
        raise EmptyMaskError("cannot trace an empty mask")
    largest = connected_components(mask, connectivity=8)[0]
    return PolygonSet((_trace_outer_ring(largest),))


def _point_segment_distance(px: float, py: float,
                            ax: float, ay: float,
                            bx: float, by: float) -> float:
    dx, dy = bx - ax, by - ay
    seg_len2 = dx * dx + dy * dy
    if seg_len2 == 0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / seg_len2
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _rdp_chain(pts: list[tuple[float, float]], eps: float) -> list[tuple[float, float]]:
    """Iterative Ramer-Douglas-Peucker on an open chain (keeps endpoints)."""
    n = len(pts)
    keep = [False] * n
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        ax, ay = pts[lo]
        bx, by = pts[hi]
        dmax, imax = -1.0, lo
        for i in range(lo + 1, hi):
            d = _point_segment_distance(pts[i][0], pts[i][1], ax, ay, bx, by)
            if d > dmax:
                dmax, imax = d, i
        if dmax > eps:
            keep[imax] = True
            stack.append((lo, imax))
            stack.append((imax, hi))
    return [p for p, k in zip(pts, keep) if k]


def simplify_polygon(ring: Ring, epsilon_ratio: float) -> tuple[float, ...]:
    """Douglas-Peucker simplification of a closed ring.

    The tolerance is ``epsilon_ratio * perimeter``; every dropped vertex
    stays within that distance of the simplified ring, and the output
    vertices are a subset of the input's.  ``epsilon_ratio == 0`` returns
    the ring verbatim.
    """
    if epsilon_ratio < 0:
        raise ValueError("epsilon_ratio must be >= 0")
    pts = _ring_points(ring)
    if epsilon_ratio == 0:
        return tuple(float(v) for v in ring)
    eps = epsilon_ratio * ring_perimeter(ring)
    # Split the ring at vertex 0 and the vertex farthest from it, then
    # simplify the two open chains independently.
    x0, y0 = pts[0]
    far = max(range(1, len(pts)), key=lambda i: (pts[i][0] - x0) ** 2 + (pts[i][1] - y0) ** 2)
    chain1 = _rdp_chain(pts[: far + 1], eps)
    chain2 = _rdp_chain(pts[far:] + [pts[0]], eps)
    merged = chain1[:-1] + chain2[:-1]
    if len(merged) < 3:
        raise DegenerateRingError("simplification collapsed ring below 3 vertices")
    flat: list[float] = []
    for x, y in merged:
        flat.extend((x, y))
    return tuple(flat)


def mask_to_bbox(mask: np.ndarray) -> BBox:
    """Tight box over set pixels, inclusive pixel extents (1 px wide per pixel)."""
    if not mask.any():
        raise EmptyMaskError("cannot bound an empty mask")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    return BBox(float(c0), float(r0), float(c1 - c0 + 1), float(r1 - r0 + 1))


def mask_to_pgm(mask: np.ndarray) -> str:
    """Debug dump in plain PBM text format (P1)."""
    h, w = mask.shape
    lines = [f"P1", f"{w} {h}"]
    for row in mask.astype(int):
        lines.append(" ".join(str(v) for v in row))
    return "\n".join(lines) + "\n"
