"""Space-time grids with fields and cell sets.

Fields live on nodes: ``values[n, i]`` (1-D) or ``values[n, i, j]`` (2-D),
``n`` the time level.  Measures and compact sets live on space-time cells.
Cell ``(n, i[, j])`` is the dual cell around spatial node ``i[, j]`` spanning
the time interval ``(t_{n-1}, t_n]``, so cell arrays share the field shape.
Only cells with ``n >= 1`` at interior nodes carry weight.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class Grid:
    dim: int
    nx: int
    nt: int
    dt: float
    Lx: float = 1.0
    ny: int | None = None
    Ly: float | None = None
    t0: float = 0.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.nx < 2 or self.nt < 2:
            raise ValueError("nx and nt must be at least 2")
        if not (self.dt > 0 and self.Lx > 0):
            raise ValueError("dt and Lx must be positive")
        if self.dim == 1:
            if self.ny is not None or self.Ly is not None:
                raise ValueError("ny/Ly given for a 1-D grid")
        else:
            ny = self.nx if self.ny is None else self.ny
            Ly = self.Lx * ny / self.nx if self.Ly is None else self.Ly
            if ny < 2:
                raise ValueError("ny must be at least 2")
            if not np.isclose(Ly / ny, self.Lx / self.nx, rtol=1e-12, atol=0):
                raise ValueError("2-D cells must be square (Lx/nx == Ly/ny)")
            object.__setattr__(self, "ny", int(ny))
            object.__setattr__(self, "Ly", float(Ly))

    @classmethod
    def make(cls, dim=1, nx=16, nt=16, Lx=1.0, dt=None, ny=None, Ly=None, t0=0.0):
        """Build a grid; ``dt`` defaults to ``h``."""
        h = Lx / nx
        return cls(dim=dim, nx=nx, nt=nt, dt=h if dt is None else dt, Lx=Lx,
                   ny=ny, Ly=Ly, t0=t0)

    @property
    def h(self) -> float:
        return self.Lx / self.nx

    @property
    def node_shape(self) -> tuple[int, ...]:
        if self.dim == 1:
            return (self.nx + 1,)
        return (self.nx + 1, self.ny + 1)

    @property
    def interior_shape(self) -> tuple[int, ...]:
        return tuple(s - 2 for s in self.node_shape)

    @property
    def field_shape(self) -> tuple[int, ...]:
        return (self.nt,) + self.node_shape

    @property
    def cell_volume(self) -> float:
        return self.h ** self.dim * self.dt

    @property
    def T(self) -> float:
        return (self.nt - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.nt)

    def axes(self) -> list[np.ndarray]:
        xs = [self.h * np.arange(self.nx + 1)]
        if self.dim == 2:
            xs.append(self.h * np.arange(self.ny + 1))
        return xs

    def coords(self) -> list[np.ndarray]:
        """Nodal coordinate arrays with ``node_shape``."""
        return list(np.meshgrid(*self.axes(), indexing="ij"))

    def spatial_interior(self) -> np.ndarray:
        mask = np.zeros(self.node_shape, dtype=bool)
        mask[(slice(1, -1),) * self.dim] = True
        return mask

    def active_cells(self) -> np.ndarray:
        """Cells that may carry measure: level >= 1, interior node."""
        mask = np.zeros(self.field_shape, dtype=bool)
        mask[1:] = self.spatial_interior()
        return mask

    def with_nt(self, nt: int) -> "Grid":
        return Grid(self.dim, self.nx, nt, self.dt, self.Lx, self.ny, self.Ly, self.t0)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "nx": self.nx, "ny": self.ny, "nt": self.nt,
                "h": self.h, "dt": self.dt, "Lx": self.Lx, "Ly": self.Ly, "t0": self.t0}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(dim=int(d["dim"]), nx=int(d["nx"]), nt=int(d["nt"]), dt=float(d["dt"]),
                   Lx=float(d["Lx"]), ny=None if d.get("ny") is None else int(d["ny"]),
                   Ly=None if d.get("Ly") is None else float(d["Ly"]),
                   t0=float(d.get("t0", 0.0)))

    def key(self) -> str:
        """Stable identifier used to detect grid mismatches."""
        import hashlib
        import json
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Field:
    grid: Grid
    values: np.ndarray
    name: str = "u"
    nonnegative: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.field_shape:
            raise ValueError(f"field shape {self.values.shape} != grid {self.grid.field_shape}")

    def check(self):
        """Raise if the field is non-finite or (when flagged) negative."""
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"field {self.name!r} has non-finite values")
        if self.nonnegative:
            top = max(1.0, float(self.values.max(initial=0.0)))
            if self.values.min(initial=0.0) < -1e-12 * top:
                raise ValueError(f"field {self.name!r} is negative")
        return self

    @property
    def sup(self) -> float:
        return float(np.abs(self.values).max(initial=0.0))

    def level(self, n: int) -> np.ndarray:
        return self.values[n]


def laplacian(f: np.ndarray, h: float) -> np.ndarray:
    """Standard 3/5-point Laplacian of a nodal array; returns interior values."""
    if f.ndim == 1:
        return (f[:-2] - 2.0 * f[1:-1] + f[2:]) / h**2
    c = f[1:-1, 1:-1]
    return (f[:-2, 1:-1] + f[2:, 1:-1] + f[1:-1, :-2] + f[1:-1, 2:] - 4.0 * c) / h**2


def discrete_laplacian(f: Field, level: int) -> np.ndarray:
    if not 0 <= level < f.grid.nt:
        raise IndexError(f"level {level} out of range [0, {f.grid.nt})")
    return laplacian(f.values[level], f.grid.h)


def boundary_nodes(grid: Grid, which: str = "parabolic") -> np.ndarray:
    """Boolean node mask over the field shape.

    ``parabolic`` is the initial level plus the lateral boundary at every
    later level; ``lateral`` omits level 0; ``top`` is the interior of the
    final level.
    """
    mask = np.zeros(grid.field_shape, dtype=bool)
    side = ~grid.spatial_interior()
    if which == "parabolic":
        mask[0] = True
        mask[1:] = side
    elif which == "lateral":
        mask[1:] = side
    elif which == "top":
        mask[-1] = ~side
    else:
        raise ValueError(f"unknown boundary kind {which!r}")
    return mask


def margin_mask(grid: Grid) -> np.ndarray:
    """Cells a compact set may not touch: spatial boundary, level 0, final level."""
    mask = boundary_nodes(grid, "parabolic")
    mask[-1] = True
    return mask


class MarginError(ValueError):
    pass


@dataclass(frozen=True)
class CompactSet:
    grid: Grid
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != self.grid.field_shape:
            raise ValueError("mask shape does not match grid")
        if np.any(mask & margin_mask(self.grid)):
            raise MarginError("compact set touches the parabolic boundary or final level")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def empty(cls, grid: Grid) -> "CompactSet":
        return cls(grid, np.zeros(grid.field_shape, dtype=bool))

    @classmethod
    def box(cls, grid: Grid, levels: tuple[int, int], *ranges: tuple[int, int]) -> "CompactSet":
        """Closed box of cells, index ranges inclusive."""
        if len(ranges) != grid.dim:
            raise ValueError("one index range per spatial axis")
        mask = np.zeros(grid.field_shape, dtype=bool)
        sl = (slice(levels[0], levels[1] + 1),) + tuple(slice(a, b + 1) for a, b in ranges)
        mask[sl] = True
        return cls(grid, mask)

    @classmethod
    def from_cells(cls, grid: Grid, cells: Iterable[Sequence[int]]) -> "CompactSet":
        mask = np.zeros(grid.field_shape, dtype=bool)
        for c in cells:
            mask[tuple(c)] = True
        return cls(grid, mask)

    @property
    def is_empty(self) -> bool:
        return not self.mask.any()

    def __len__(self):
        return int(self.mask.sum())

    def __or__(self, other: "CompactSet") -> "CompactSet":
        return CompactSet(self.grid, self.mask | other.mask)

    def issubset(self, other: "CompactSet") -> bool:
        return not np.any(self.mask & ~other.mask)

    def last_level(self) -> int:
        levels = np.nonzero(self.mask.reshape(self.grid.nt, -1).any(axis=1))[0]
        return int(levels.max()) if levels.size else 0

    def dilate(self, radius: int = 1) -> np.ndarray:
        """Chessboard dilation of the mask (may touch the margin)."""
        if radius <= 0 or self.is_empty:
            return self.mask.copy()
        return chessboard_distance(self.mask) <= radius

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "mask_rle": rle_encode(self.mask)}

    @classmethod
    def from_dict(cls, d: dict) -> "CompactSet":
        grid = Grid.from_dict(d["grid"])
        return cls(grid, rle_decode(d["mask_rle"], grid.field_shape))


def rle_encode(mask: np.ndarray) -> list[list[int]]:
    """Run-length encode a boolean mask as ``[start, length]`` pairs of flat indices."""
    flat = np.concatenate([[False], mask.ravel(), [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(flat))
    return [[int(a), int(b - a)] for a, b in zip(edges[::2], edges[1::2])]


def rle_decode(runs, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    for start, length in runs:
        flat[start:start + length] = True
    return flat.reshape(shape)


def chessboard_distance(mask: np.ndarray) -> np.ndarray:
    """Graph distance (space-time, diagonals count 1) from every cell to ``mask``."""
    if not mask.any():
        return np.full(mask.shape, np.iinfo(np.int32).max)
    return ndimage.distance_transform_cdt(~mask, metric="chessboard")


def shrink_neighborhoods(K: CompactSet, i_max: int, radius: int = 3) -> list[np.ndarray]:
    """Nested open cell sets ``E_i = {dist(., K) < ceil(radius / i)}``, i = 1..i_max."""
    if K.is_empty:
        raise ValueError("shrink_neighborhoods needs a nonempty K")
    if radius < 1 or i_max < 1:
        raise ValueError("radius and i_max must be positive")
    dist = chessboard_distance(K.mask)
    out = [dist < -(-radius // i) for i in range(1, i_max + 1)]
    if np.any(out[0] & margin_mask(K.grid)):
        raise MarginError(f"K is too close to the boundary for radius {radius}")
    return out


@dataclass(frozen=True)
class SpaceTimeUnion:
    """Finite union of closed, grid-aligned space-time boxes.

    Each box is ``((n0, n1), (i0, i1)[, (j0, j1)])`` in node indices.  The
    discrete open set is the union of box interiors; its boundary nodes split
    into lateral, top and bottom pieces (lateral takes precedence, then top).
    """
    grid: Grid
    boxes: tuple

    def __post_init__(self):
        g = self.grid
        limits = (g.nt - 1,) + tuple(s - 1 for s in g.node_shape)
        for box in self.boxes:
            if len(box) != g.dim + 1:
                raise ValueError("box rank does not match grid")
            for (a, b), top in zip(box, limits):
                if not (0 <= a < b <= top):
                    raise ValueError(f"box {box} is not a nondegenerate grid-aligned box")

    def _closed(self, box) -> np.ndarray:
        mask = np.zeros(self.grid.field_shape, dtype=bool)
        mask[tuple(slice(a, b + 1) for a, b in box)] = True
        return mask

    def _open(self, box) -> np.ndarray:
        mask = np.zeros(self.grid.field_shape, dtype=bool)
        mask[tuple(slice(a + 1, b) for a, b in box)] = True
        return mask

    @property
    def closure(self) -> np.ndarray:
        return np.logical_or.reduce([self._closed(b) for b in self.boxes])

    @property
    def interior(self) -> np.ndarray:
        """Nodes of the open union: interior of some box, or of the union's closure."""
        inner = np.logical_or.reduce([self._open(b) for b in self.boxes])
        # nodes shared by touching boxes are interior when all space-time neighbours are inside
        clo = self.closure
        full = ndimage.binary_erosion(clo, structure=np.ones((3,) * clo.ndim, bool),
                                      border_value=0)
        return inner | full

    def pieces(self) -> dict[str, np.ndarray]:
        inner = self.interior
        lateral = np.zeros_like(inner)
        top = np.zeros_like(inner)
        bottom = np.zeros_like(inner)
        for box in self.boxes:
            (n0, n1), space = box[0], box[1:]
            closed = self._closed(box)
            side = closed.copy()
            side[tuple([slice(None)] + [slice(a + 1, b) for a, b in space])] = False
            side[: n0 + 1] = False
            side[n1:] = False
            lateral |= side
            top[n1] |= closed[n1]
            bottom[n0] |= closed[n0]
        lateral &= ~inner
        top &= ~inner & ~lateral
        bottom &= ~inner & ~lateral & ~top
        return {"lateral": lateral, "top": top, "bottom": bottom}

    @property
    def boundary(self) -> np.ndarray:
        return self.closure & ~self.interior
