"""Channel grid, staggered field layout, weather stations, and grid transfer.

Array conventions used throughout the package (all float64, C order):

* cell-centered fields      ``(..., ny, nx)``; a two-layer field is
  ``(..., 2, ny, nx)`` with the layer axis outermost (layer 0 = top).
  Index ``[j, i]`` is (y, x); rows grow northwards, columns are periodic
  in x.
* x-face fields (vertical cell faces): ``(..., ny, nx)``; face ``i`` sits
  at ``x = i*dx``, so column ``nx`` wraps onto column 0.  Cell ``c`` has
  left face ``c`` and right face ``(c+1) % nx``.
* y-face fields (horizontal cell faces): ``(..., ny+1, nx)``; rows 0 and
  ``ny`` are the channel walls.  Cell row ``r`` has south face ``r`` and
  north face ``r+1``.
* node fields: ``(..., ny+1, nx)``; rows 0 and ``ny`` lie on the walls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform channel grid, periodic in x with walls at y=0 and y=Ly."""

    nx: int
    ny: int
    Lx: float
    Ly: float

    def __post_init__(self):
        # transfer targets may be as small as 2x2; solver entry points
        # (build_workspace) demand at least 4x4
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.nx}x{self.ny}")
        if not (self.Lx > 0 and self.Ly > 0):
            raise ValueError("domain lengths must be positive")

    @property
    def dx(self) -> float:
        return self.Lx / self.nx

    @property
    def dy(self) -> float:
        return self.Ly / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def x_centers(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    def y_centers(self) -> np.ndarray:
        return (np.arange(self.ny) + 0.5) * self.dy


def xface_column(field: np.ndarray, i: int) -> np.ndarray:
    """Read x-face column ``i`` with periodic wrap (column nx == column 0)."""
    return field[..., i % field.shape[-1]]


@dataclass(frozen=True)
class StationSet:
    """Weather stations pinned to cells of the signal grid."""

    ix: np.ndarray  # (M,) cell column index
    iy: np.ndarray  # (M,) cell row index
    x: np.ndarray   # (M,) physical x of the station cell center, m
    y: np.ndarray   # (M,) physical y, m
    layout: str

    def __post_init__(self):
        if not (len(self.ix) == len(self.iy) == len(self.x) == len(self.y)):
            raise ValueError("station arrays must have equal length")
        pairs = set(zip(self.ix.tolist(), self.iy.tolist()))
        if len(pairs) != len(self.ix):
            raise ValueError("station locations must be distinct")

    @property
    def m(self) -> int:
        return len(self.ix)


def make_equidistant_stations(grid: Grid, rows: int, cols: int) -> StationSet:
    """Place rows*cols stations on a uniform interior sub-lattice.

    Station (k, l) sits at the cell nearest to
    ((k+1)*nx/(cols+1), (l+1)*ny/(rows+1)), which keeps every station off
    the walls.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be at least 1")
    if cols > grid.nx or rows > grid.ny or rows * cols > grid.nx * grid.ny:
        raise ValueError(
            f"station layout {rows}x{cols} exceeds grid {grid.nx}x{grid.ny}"
        )
    ixs = np.rint((np.arange(cols) + 1) * grid.nx / (cols + 1)).astype(int)
    iys = np.rint((np.arange(rows) + 1) * grid.ny / (rows + 1)).astype(int)
    ixs = np.clip(ixs, 0, grid.nx - 1)
    iys = np.clip(iys, 0, grid.ny - 1)
    ix = np.tile(ixs, rows)
    iy = np.repeat(iys, cols)
    return StationSet(
        ix=ix,
        iy=iy,
        x=(ix + 0.5) * grid.dx,
        y=(iy + 0.5) * grid.dy,
        layout=f"{rows}x{cols}",
    )


def coarse_grain(fine: np.ndarray, fine_grid: Grid, coarse_grid: Grid) -> np.ndarray:
    """Block-average a cell-centered field onto a coarser grid.

    Each coarse cell value is the arithmetic mean of the fine cells it
    covers, so the domain integral is preserved exactly.
    """
    rx, ry = fine_grid.nx // coarse_grid.nx, fine_grid.ny // coarse_grid.ny
    if fine_grid.nx != rx * coarse_grid.nx or fine_grid.ny != ry * coarse_grid.ny:
        raise ValueError(
            f"fine grid {fine_grid.nx}x{fine_grid.ny} is not an integer multiple "
            f"of coarse grid {coarse_grid.nx}x{coarse_grid.ny}"
        )
    if fine.shape[-2:] != (fine_grid.ny, fine_grid.nx):
        raise ValueError("field shape does not match the fine grid")
    blocks = fine.reshape(fine.shape[:-2] + (coarse_grid.ny, ry, coarse_grid.nx, rx))
    return blocks.mean(axis=(-3, -1))


def sample_at_stations(
    u_centers: np.ndarray, v_centers: np.ndarray, stations: StationSet
) -> np.ndarray:
    """Project layer-1 cell-centered velocity onto the stations.

    ``u_centers``/``v_centers`` are ``(..., 2, ny, nx)``; the result is
    ``(..., M, 2)`` with columns (u, v).  No observation noise is added.
    """
    ny, nx = u_centers.shape[-2:]
    if (stations.iy >= ny).any() or (stations.ix >= nx).any():
        raise ValueError("station outside grid")
    u = u_centers[..., 0, stations.iy, stations.ix]
    v = v_centers[..., 0, stations.iy, stations.ix]
    return np.stack([u, v], axis=-1)


def center_velocities(u_faces: np.ndarray, v_faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average face velocities onto cell centers.

    ``u_faces`` is ``(..., ny, nx)`` on x-faces, ``v_faces`` is
    ``(..., ny+1, nx)`` on y-faces; both may carry extra leading axes.
    """
    u_c = 0.5 * (u_faces + np.roll(u_faces, -1, axis=-1))
    v_c = 0.5 * (v_faces[..., :-1, :] + v_faces[..., 1:, :])
    return u_c, v_c
