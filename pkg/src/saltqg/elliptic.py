"""Coupled two-layer PV inversion in a channel.

The PV anomaly and stream function are tied by

    q1 = lap(psi1) + s1 (psi2 - psi1)
    q2 = lap(psi2) + s2 (psi1 - psi2)

with a 5-point Laplacian, periodic in x, and psi held at a single
time-dependent constant per layer on both walls (ghost cells mirror the
wall value).  The two wall constants are pinned by the integral mass
constraint on (psi1 - psi2) and by a zero-mean gauge on layer 1.

The solve diagonalizes the layer coupling into a barotropic mode
(eigenvalue 0, a Poisson problem) and a baroclinic mode (eigenvalue
-(s1+s2), a Helmholtz problem), applies an FFT in x, and eliminates the
resulting tridiagonal systems in y with precomputed Thomas factors, so a
call costs O(nx ny log nx).  All entry points broadcast over arbitrary
leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid


class EllipticError(RuntimeError):
    """Raised when the constrained inversion cannot be performed."""


@dataclass(frozen=True)
class StratificationParams:
    """Layer coupling coefficients, in 1/m^2."""

    s1: float
    s2: float

    def __post_init__(self):
        if not (self.s1 > 0 and self.s2 > 0):
            raise ValueError("stratification parameters must be positive")

    @classmethod
    def from_per_km2(cls, s1_km2: float, s2_km2: float) -> "StratificationParams":
        return cls(s1=s1_km2 * 1e-6, s2=s2_km2 * 1e-6)


class _TriFactor:
    """Thomas factorization of the y-direction tridiagonal systems.

    One system per zonal wavenumber: diag = -2/dy^2 - kappa - alpha in the
    interior, -3/dy^2 - kappa - alpha at the wall rows (mirror-ghost
    Dirichlet closure), off-diagonals 1/dy^2.  Factors are stored as
    (ny, n_modes) arrays so sweeps broadcast over batch axes.
    """

    def __init__(self, ny: int, dy: float, kappa2: np.ndarray, alpha: float):
        n_modes = len(kappa2)
        inv_dy2 = 1.0 / dy**2
        diag = np.full((ny, n_modes), -2.0 * inv_dy2)
        diag[0] = -3.0 * inv_dy2
        diag[-1] = -3.0 * inv_dy2
        diag -= kappa2[None, :] + alpha
        self.off = inv_dy2
        self.w = np.empty((ny - 1, n_modes))
        self.inv_d = np.empty((ny, n_modes))
        d = diag[0].copy()
        self.inv_d[0] = 1.0 / d
        for j in range(1, ny):
            self.w[j - 1] = self.off * self.inv_d[j - 1]
            d = diag[j] - self.off * self.w[j - 1]
            self.inv_d[j] = 1.0 / d
        self.ny = ny

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for all modes at once; rhs is (..., ny, n_modes)."""
        g = np.empty_like(rhs)
        g[..., 0, :] = rhs[..., 0, :] * self.inv_d[0]
        for j in range(1, self.ny):
            g[..., j, :] = (rhs[..., j, :] - self.off * g[..., j - 1, :]) * self.inv_d[j]
        x = np.empty_like(rhs)
        x[..., -1, :] = g[..., -1, :]
        for j in range(self.ny - 2, -1, -1):
            x[..., j, :] = g[..., j, :] - self.w[j] * x[..., j + 1, :]
        return x


def _thomas_1d(sub: float, diag: np.ndarray, sup: float, rhs: np.ndarray) -> np.ndarray:
    n = len(diag)
    w = np.empty(n - 1)
    g = np.empty(n)
    d = diag[0]
    g[0] = rhs[0] / d
    for j in range(1, n):
        w[j - 1] = sup / d
        d = diag[j] - sub * w[j - 1]
        g[j] = (rhs[j] - sub * g[j - 1]) / d
    x = np.empty(n)
    x[-1] = g[-1]
    for j in range(n - 2, -1, -1):
        x[j] = g[j] - w[j] * x[j + 1]
    return x


@dataclass
class EllipticWorkspace:
    """Precomputed transforms and factorizations for one (grid, strat) pair."""

    grid: Grid
    strat: StratificationParams
    kappa2: np.ndarray
    fac_bt: _TriFactor
    fac_bc: _TriFactor
    h_bc: np.ndarray          # homogeneous baroclinic profile, wall value 1
    mass_denominator: float   # d(mass)/d(c_bc) divided by (s1+s2)
    mode_eigenvalues: tuple[float, float]


def build_workspace(grid: Grid, strat: StratificationParams) -> EllipticWorkspace:
    """Factorize the inversion for ``grid`` and ``strat``."""
    if grid.nx < 4 or grid.ny < 4:
        raise ValueError(f"solver grids must be at least 4x4, got {grid.nx}x{grid.ny}")
    nxf = grid.nx // 2 + 1
    m = np.arange(nxf)
    # discrete symbol of the periodic second difference in x
    kappa2 = (2.0 - 2.0 * np.cos(2.0 * np.pi * m / grid.nx)) / grid.dx**2
    total = strat.s1 + strat.s2
    fac_bt = _TriFactor(grid.ny, grid.dy, kappa2, alpha=0.0)
    fac_bc = _TriFactor(grid.ny, grid.dy, kappa2, alpha=total)

    # homogeneous baroclinic profile: (D2y - total) h = 0 with wall value 1
    inv_dy2 = 1.0 / grid.dy**2
    diag = np.full(grid.ny, -2.0 * inv_dy2 - total)
    diag[0] = diag[-1] = -3.0 * inv_dy2 - total
    rhs = np.zeros(grid.ny)
    rhs[0] = rhs[-1] = -2.0 * inv_dy2
    h_bc = _thomas_1d(inv_dy2, diag, inv_dy2, rhs)

    mass_denominator = grid.Lx * grid.dy * float(h_bc.sum())
    if abs(mass_denominator) < 1e-300:
        raise EllipticError("singular mass-constraint system: sum of the "
                            "homogeneous baroclinic profile vanishes")
    return EllipticWorkspace(
        grid=grid,
        strat=strat,
        kappa2=kappa2,
        fac_bt=fac_bt,
        fac_bc=fac_bc,
        h_bc=h_bc,
        mass_denominator=mass_denominator,
        mode_eigenvalues=(0.0, -total),
    )


def _solve_mode(fac: _TriFactor, field: np.ndarray, nx: int) -> np.ndarray:
    """Invert one vertical mode with homogeneous wall values."""
    spec = np.fft.rfft(field, axis=-1)
    spec = fac.solve(spec)
    return np.fft.irfft(spec, n=nx, axis=-1)


def invert_pv(
    q: np.ndarray, ws: EllipticWorkspace, mass_target=0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Invert the coupled PV relation for psi.

    ``q`` is ``(..., 2, ny, nx)``; ``mass_target`` is the required value of
    the domain integral of (psi1 - psi2), broadcastable over the batch.
    Returns ``(psi, wall_constants)`` with ``wall_constants`` of shape
    ``(..., 2)``: the value psi takes on both walls, per layer.
    """
    grid, strat = ws.grid, ws.strat
    if q.shape[-3:] != (2, grid.ny, grid.nx):
        raise ValueError(f"q shape {q.shape} does not match grid "
                         f"(..., 2, {grid.ny}, {grid.nx})")
    if not np.all(np.isfinite(q)):
        raise EllipticError("non-finite PV input")
    total = strat.s1 + strat.s2
    q1, q2 = q[..., 0, :, :], q[..., 1, :, :]
    q_bt = (strat.s2 * q1 + strat.s1 * q2) / total
    q_bc = (q1 - q2) / total

    p_bt = _solve_mode(ws.fac_bt, q_bt, grid.nx)
    p_bc = _solve_mode(ws.fac_bc, q_bc, grid.nx)

    # wall constant of the baroclinic mode from the mass constraint
    mass_target = np.asarray(mass_target, dtype=np.float64)
    integral_p_bc = p_bc.sum(axis=(-2, -1)) * grid.cell_area
    c_bc = (mass_target / total - integral_p_bc) / ws.mass_denominator
    p_bc = p_bc + c_bc[..., None, None] * ws.h_bc[:, None]

    # barotropic constant from the zero-mean gauge on layer 1
    c_bt = -(p_bt.mean(axis=(-2, -1)) + strat.s1 * p_bc.mean(axis=(-2, -1)))
    p_bt = p_bt + c_bt[..., None, None]

    psi1 = p_bt + strat.s1 * p_bc
    psi2 = p_bt - strat.s2 * p_bc
    psi = np.stack([psi1, psi2], axis=-3)
    constants = np.stack([c_bt + strat.s1 * c_bc, c_bt - strat.s2 * c_bc], axis=-1)
    return psi, constants


def apply_pv_operator(
    psi: np.ndarray, wall_constants: np.ndarray, strat: StratificationParams, grid: Grid
) -> np.ndarray:
    """Forward discrete operator: psi (and wall values) -> q."""
    lap = laplacian(psi, wall_constants, grid)
    psi1, psi2 = psi[..., 0, :, :], psi[..., 1, :, :]
    q1 = lap[..., 0, :, :] + strat.s1 * (psi2 - psi1)
    q2 = lap[..., 1, :, :] + strat.s2 * (psi1 - psi2)
    return np.stack([q1, q2], axis=-3)


def laplacian(psi: np.ndarray, wall_constants: np.ndarray, grid: Grid) -> np.ndarray:
    """5-point Laplacian of a cell-centered layered field.

    Wall closure mirrors the constant wall value: ghost = 2c - psi_adjacent.
    ``wall_constants`` is (..., 2), one value per layer for both walls.
    """
    wall = np.asarray(wall_constants)[..., None]
    xpart = (np.roll(psi, 1, axis=-1) - 2.0 * psi + np.roll(psi, -1, axis=-1)) / grid.dx**2
    ypart = np.empty_like(psi)
    inv_dy2 = 1.0 / grid.dy**2
    ypart[..., 1:-1, :] = (psi[..., :-2, :] - 2.0 * psi[..., 1:-1, :] + psi[..., 2:, :]) * inv_dy2
    ypart[..., 0, :] = (2.0 * wall - 3.0 * psi[..., 0, :] + psi[..., 1, :]) * inv_dy2
    ypart[..., -1, :] = (psi[..., -2, :] - 3.0 * psi[..., -1, :] + 2.0 * wall) * inv_dy2
    return xpart + ypart


def psi_nodes(psi: np.ndarray, wall_constants: np.ndarray) -> np.ndarray:
    """Average cell-centered psi onto nodes; wall rows take the wall value."""
    batch = psi.shape[:-2]
    ny, nx = psi.shape[-2:]
    nodes = np.empty(batch + (ny + 1, nx), dtype=psi.dtype)
    west = np.roll(psi, 1, axis=-1)
    nodes[..., 1:-1, :] = 0.25 * (
        psi[..., 1:, :] + psi[..., :-1, :] + west[..., 1:, :] + west[..., :-1, :]
    )
    wall = np.asarray(wall_constants)[..., None]
    nodes[..., 0, :] = wall
    nodes[..., -1, :] = wall
    return nodes


def velocities_from_psi(
    psi: np.ndarray,
    wall_constants: np.ndarray,
    grid: Grid,
    background_u: tuple[float, float] = (0.0, 0.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Face velocities from the stream function.

    u on x-faces is the forward y-difference of node psi, v on y-faces the
    negative forward x-difference; the wall rows of v vanish identically.
    The background flow enters through the substitution
    psi -> -U_l * y + psi, i.e. as a constant -U_l added to u in layer l.
    """
    nodes = psi_nodes(psi, wall_constants)
    u = (nodes[..., 1:, :] - nodes[..., :-1, :]) / grid.dy
    bg = np.asarray(background_u, dtype=np.float64)
    if np.any(bg != 0.0):
        u = u - bg[:, None, None]
    v = -(np.roll(nodes, -1, axis=-1) - nodes) / grid.dx
    v[..., 0, :] = 0.0
    v[..., -1, :] = 0.0
    return u, v
