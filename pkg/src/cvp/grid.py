"""Allocentric bird's-eye-view grid and its text prompt.

Object centers are dropped onto a uniform ``rows x cols`` partition of the
ground plane. Following the prompt wording, ``row`` indexes the world x axis
and ``col`` the world y axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .scene import SceneObject

DEFAULT_SIZE = 6
ABLATION_SIZES = (6, 10, 16, 24)
AUTO_PADDING = 1e-6

PROMPT_HEADER = (
    "This is a top-down view of a scene divided into a {grid_H} by {grid_W} grid. Each cell\n"
    "may contain multiple objects, and the objects are separated by commas. This is an\n"
    "abstraction of the scene and might be incomplete.\n"
)
CELL_LINE = "At (row={x}, col={y}), there is: {obj_str},\n"


class EmptySceneError(ValueError):
    """Automatic bounds were requested for a scene without objects."""


@dataclass(frozen=True)
class GridSpec:
    rows: int = DEFAULT_SIZE
    cols: int = DEFAULT_SIZE
    bounds: tuple[float, float, float, float] = (0.0, 6.0, 0.0, 6.0)  # x_min, x_max, y_min, y_max

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one row and one column")
        x0, x1, y0, y1 = self.bounds
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate grid bounds {self.bounds}")
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))


@dataclass(frozen=True)
class AutoGrid:
    """Grid size whose bounds are fitted to the object centers."""

    rows: int = DEFAULT_SIZE
    cols: int = DEFAULT_SIZE


@dataclass(frozen=True)
class AllocentricGrid:
    spec: GridSpec
    cells: Mapping[tuple[int, int], tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for (r, c), names in self.cells.items():
            if not (0 <= r < self.spec.rows and 0 <= c < self.spec.cols):
                raise ValueError(f"cell ({r}, {c}) outside a {self.spec.rows}x{self.spec.cols} grid")
            if not names:
                raise ValueError("empty cells must be absent, not stored")

    @property
    def object_count(self) -> int:
        return sum(len(names) for names in self.cells.values())


def bev_center(obj: SceneObject) -> tuple[float, float]:
    return (
        (float(obj.aabb_min[0]) + float(obj.aabb_max[0])) / 2,
        (float(obj.aabb_min[1]) + float(obj.aabb_max[1])) / 2,
    )


def _axis_index(value: float, lo: float, hi: float, n: int) -> int:
    i = math.floor((value - lo) / ((hi - lo) / n))
    return min(max(i, 0), n - 1)


def cell_index(x: float, y: float, spec: GridSpec) -> tuple[int, int]:
    """Cell holding ``(x, y)``; points outside the bounds clamp to the border cells."""
    x0, x1, y0, y1 = spec.bounds
    return _axis_index(x, x0, x1, spec.rows), _axis_index(y, y0, y1, spec.cols)


def auto_spec(objects: Iterable[SceneObject], rows: int = DEFAULT_SIZE, cols: int = DEFAULT_SIZE) -> GridSpec:
    centers = [bev_center(o) for o in objects]
    if not centers:
        raise EmptySceneError("cannot fit grid bounds to a scene with no objects")
    xs, ys = zip(*centers)
    return GridSpec(
        rows,
        cols,
        (min(xs) - AUTO_PADDING, max(xs) + AUTO_PADDING, min(ys) - AUTO_PADDING, max(ys) + AUTO_PADDING),
    )


def build_grid(objects: Iterable[SceneObject], spec: GridSpec | AutoGrid = AutoGrid()) -> AllocentricGrid:
    objects = sorted(objects, key=lambda o: o.id)
    if isinstance(spec, AutoGrid):
        spec = auto_spec(objects, spec.rows, spec.cols)
    cells: dict[tuple[int, int], list[str]] = {}
    for obj in objects:
        cells.setdefault(cell_index(*bev_center(obj), spec), []).append(obj.category)
    return AllocentricGrid(spec, {key: tuple(names) for key, names in sorted(cells.items())})


def serialize_grid(grid: AllocentricGrid) -> str:
    parts = [PROMPT_HEADER.format(grid_H=grid.spec.rows, grid_W=grid.spec.cols)]
    for (r, c) in sorted(grid.cells):
        parts.append(CELL_LINE.format(x=r, y=c, obj_str=", ".join(grid.cells[(r, c)])))
    return "".join(parts)
