"""8-connected components and their outer boundaries.

Boundaries are traced clockwise with the Moore-neighbor algorithm and
Jacob's stopping criterion, starting at the component's top-left-most
pixel. Points are ``(x, y)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

EIGHT = np.ones((3, 3), dtype=bool)

# clockwise on screen (y grows downward), starting at west
_DIRS = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]
_DIR_INDEX = {d: i for i, d in enumerate(_DIRS)}


@dataclass
class Contour:
    points: np.ndarray  # (n, 2) int, (x, y), clockwise
    area: int
    centroid: tuple[float, float]  # (x, y)

    @property
    def start(self) -> tuple[int, int]:
        return int(self.points[0, 0]), int(self.points[0, 1])


def label_components(mask) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(mask) > 0, structure=EIGHT)


def moore_trace(component: np.ndarray) -> np.ndarray:
    """Clockwise outer boundary of a single 8-connected component."""
    obj = np.pad(np.asarray(component, dtype=bool), 1)
    ys, xs = np.nonzero(obj)
    if ys.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.lexsort((xs, ys))
    start = (int(ys[order[0]]), int(xs[order[0]]))
    # the west neighbour of the raster-first pixel is background
    start_back = 0
    path = [start]
    p, back = start, start_back
    limit = 4 * int(obj.sum()) + 8
    for _ in range(limit):
        nxt = None
        for step in range(1, 9):
            d = (back + step) % 8
            q = (p[0] + _DIRS[d][0], p[1] + _DIRS[d][1])
            if obj[q]:
                prev = (p[0] + _DIRS[(d - 1) % 8][0], p[1] + _DIRS[(d - 1) % 8][1])
                nxt = q
                back = _DIR_INDEX[(prev[0] - q[0], prev[1] - q[1])]
                break
        if nxt is None:
            break  # isolated pixel
        p = nxt
        if p == start and back == start_back:
            break
        path.append(p)
    pts = np.array([(x - 1, y - 1) for y, x in path], dtype=np.int64)
    return pts


def extract_contours(mask) -> list[Contour]:
    """One contour per 8-connected foreground component, ordered by the
    (row, column) of each component's top-left pixel."""
    labels, n = label_components(mask)
    if n == 0:
        return []
    objects = ndimage.find_objects(labels)
    found = []
    for lab, sl in enumerate(objects, start=1):
        comp = labels[sl] == lab
        ys, xs = np.nonzero(comp)
        pts = moore_trace(comp)
        pts[:, 0] += sl[1].start
        pts[:, 1] += sl[0].start
        area = int(ys.size)
        cx = float(xs.mean() + sl[1].start)
        cy = float(ys.mean() + sl[0].start)
        found.append(Contour(points=pts, area=area, centroid=(cx, cy)))
    found.sort(key=lambda c: (c.start[1], c.start[0]))
    return found


def fill_contour(contour: Contour, shape) -> np.ndarray:
    """Filled region enclosed by a boundary, as a uint8 mask of ``shape``."""
    out = np.zeros(shape, dtype=bool)
    pts = contour.points
    if len(pts) == 0:
        return out.astype(np.uint8)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    box = np.zeros((y1 - y0 + 3, x1 - x0 + 3), dtype=bool)
    box[pts[:, 1] - y0 + 1, pts[:, 0] - x0 + 1] = True
    box = ndimage.binary_fill_holes(box)
    out[y0:y1 + 1, x0:x1 + 1] = box[1:-1, 1:-1]
    return out.astype(np.uint8)


def draw_contours(contours, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=np.uint8)
    for c in contours:
        out |= fill_contour(c, shape)
    return out
