"""Grid geometry shared by the arena and the trainable task nodes.

Coordinates are (x, y) with x growing right and y growing down; a continuous
position p lies in cell (floor(px), floor(py)). The eight compass directions
are indexed counter-clockwise from east.
"""

from __future__ import annotations

import math
from collections import deque
from typing import Iterable

import numpy as np

# index: 0=E 1=NE 2=N 3=NW 4=W 5=SW 6=S 7=SE  (y grows downward, so N is -y)
DIR_OFFSETS: tuple[tuple[int, int], ...] = (
    (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1),
)
_SQ2 = math.sqrt(2.0)
DIR_VECTORS: tuple[tuple[float, float], ...] = tuple(
    (dx / (_SQ2 if dx and dy else 1.0), dy / (_SQ2 if dx and dy else 1.0))
    for dx, dy in DIR_OFFSETS
)


def cell_of(x: float, y: float) -> tuple[int, int]:
    return int(math.floor(x)), int(math.floor(y))


def in_bounds(cx: int, cy: int, width: int, height: int) -> bool:
    return 0 <= cx < width and 0 <= cy < height


def segment_cells(ax: float, ay: float, bx: float, by: float, step: float = 0.25) -> set[tuple[int, int]]:
    """Cells touched by the open segment between two points, endpoints excluded.

    Sampled at a fixed spatial step; the sample set is symmetric in the two
    endpoints, so visibility derived from it is symmetric too.
    """
    dist = math.hypot(bx - ax, by - ay)
    n = max(1, int(math.ceil(dist / step)))
    cells = {cell_of(ax + (bx - ax) * (k / n), ay + (by - ay) * (k / n)) for k in range(n + 1)}
    cells.discard(cell_of(ax, ay))
    cells.discard(cell_of(bx, by))
    return cells


def line_of_sight(
    ax: float, ay: float, bx: float, by: float,
    obstacles: frozenset[tuple[int, int]] | set[tuple[int, int]],
) -> bool:
    return not any(c in obstacles for c in segment_cells(ax, ay, bx, by))


def bfs_distance_field(
    width: int, height: int,
    obstacles: Iterable[tuple[int, int]],
    goal: tuple[int, int],
) -> np.ndarray:
    """8-connected step counts from every free cell to ``goal`` (inf if cut off)."""
    blocked = set(obstacles)
    field = np.full((height, width), np.inf)
    gx, gy = goal
    if not in_bounds(gx, gy, width, height) or (gx, gy) in blocked:
        return field
    field[gy, gx] = 0.0
    queue = deque([(gx, gy)])
    while queue:
        cx, cy = queue.popleft()
        base = field[cy, cx]
        for dx, dy in DIR_OFFSETS:
            nx, ny = cx + dx, cy + dy
            if in_bounds(nx, ny, width, height) and (nx, ny) not in blocked and field[ny, nx] == np.inf:
                field[ny, nx] = base + 1.0
                queue.append((nx, ny))
    return field
