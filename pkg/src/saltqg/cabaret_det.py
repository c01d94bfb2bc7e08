"""Deterministic CABARET step for the two-layer channel QG system.

One step advances cell-centered PV anomalies together with the cell-face
conservative variables:

* predictor: half-step conservative advection with the current face
  values, the planetary-vorticity source extrapolated in time with
  (3/2, -1/2) weights, then the half-step elliptic solve, and the viscous
  and bottom-friction forcing evaluated at the half-step stream function;
* extrapolator: face velocities pushed to the new time level with
  (3/2, -1/2) weights of the half-step values, face PV upwinded with the
  2*center - opposite-face rule;
* limiter: faces clamped into min/max bounds of the upwind-cell
  neighborhood, shifted by the cell source estimate;
* corrector: second conservative half-step with the new face values.

All arithmetic broadcasts over leading batch axes, so an ensemble of
states advances as a single set of array operations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .elliptic import EllipticWorkspace, invert_pv, velocities_from_psi
from .grid import Grid


class CflError(RuntimeError):
    """Raised when a step would violate the advective Courant bound."""

    def __init__(self, courant: float, limit: float, time: float, member: int | None = None):
        self.courant = courant
        self.limit = limit
        self.time = time
        self.member = member
        where = f" (member {member})" if member is not None else ""
        super().__init__(
            f"Courant number {courant:.3f} exceeds limit {limit:.3f} "
            f"at t={time:.1f}s{where}"
        )


@dataclass(frozen=True)
class ModelParams:
    """Physical and numerical parameters of one model configuration."""

    beta: float = 0.0                       # planetary vorticity gradient, 1/(m s)
    nu: float = 0.0                         # lateral eddy viscosity, m^2/s
    mu: float = 0.0                         # bottom friction (layer 2 only), 1/s
    U: tuple[float, float] = (0.0, 0.0)     # background zonal velocity per layer, m/s
    dt: float = 1.0                         # time step, s
    cfl_limit: float = 1.0
    # time-extrapolation weights of the stochastic beta source; the printed
    # scheme uses (3, -1), the deterministic analogue would be (1.5, -0.5)
    stoch_beta_coeffs: tuple[float, float] = (3.0, -1.0)

    def __post_init__(self):
        if self.nu < 0 or self.mu < 0:
            raise ValueError("nu and mu must be nonnegative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.cfl_limit > 0:
            raise ValueError("cfl_limit must be positive")


@dataclass
class ModelState:
    """Everything one CABARET step consumes and produces.

    Face velocities at the integer time level (``u``, ``v``) and at the
    previous half step (``u_half``, ``v_half``) plus the previous beta
    source ``r_prev`` are the only history the scheme needs.  Arrays may
    carry leading batch axes (an ensemble member per slot).
    """

    grid: Grid
    qc: np.ndarray        # (..., 2, ny, nx) cell-centered PV anomaly
    qxf: np.ndarray       # (..., 2, ny, nx) PV at x-faces
    qyf: np.ndarray       # (..., 2, ny+1, nx) PV at y-faces
    u: np.ndarray         # (..., 2, ny, nx) x-face velocity at time level n
    v: np.ndarray         # (..., 2, ny+1, nx) y-face velocity at time level n
    u_half: np.ndarray    # previous half-step x-face velocity
    v_half: np.ndarray    # previous half-step y-face velocity
    r_prev: np.ndarray    # (..., 2, ny, nx) previous beta source R
    mass: np.ndarray      # (...,) target of the mass constraint
    time: float = 0.0
    step_index: int = 0

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.qc.shape[:-3]

    _ARRAYS = ("qc", "qxf", "qyf", "u", "v", "u_half", "v_half", "r_prev", "mass")

    def copy(self) -> "ModelState":
        kw = {name: getattr(self, name).copy() for name in self._ARRAYS}
        return replace(self, **kw)

    def take(self, idx: np.ndarray) -> "ModelState":
        """Select ensemble members along the leading batch axis."""
        kw = {name: getattr(self, name)[idx].copy() for name in self._ARRAYS}
        return replace(self, **kw)

    def overwrite_where(self, mask: np.ndarray, other: "ModelState") -> None:
        """In-place replace members where ``mask`` is True (batched states)."""
        for name in self._ARRAYS:
            mine, theirs = getattr(self, name), getattr(other, name)
            extra = mine.ndim - mask.ndim
            m = mask.reshape(mask.shape + (1,) * extra)
            np.copyto(mine, theirs, where=m)


def faces_from_centers(qc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Initialize face PV by averaging adjacent centers (one-sided at walls)."""
    qxf = 0.5 * (qc + np.roll(qc, 1, axis=-1))
    batch = qc.shape[:-2]
    ny, nx = qc.shape[-2:]
    qyf = np.empty(batch + (ny + 1, nx), dtype=qc.dtype)
    qyf[..., 1:-1, :] = 0.5 * (qc[..., :-1, :] + qc[..., 1:, :])
    qyf[..., 0, :] = qc[..., 0, :]
    qyf[..., -1, :] = qc[..., -1, :]
    return qxf, qyf


def beta_term(v_faces: np.ndarray, beta: float) -> np.ndarray:
    """Cell-centered beta source R = -(beta/2)(v_north + v_south)."""
    return -0.5 * beta * (v_faces[..., 1:, :] + v_faces[..., :-1, :])


def initial_state(
    grid: Grid,
    qc: np.ndarray,
    params: ModelParams,
    ws: EllipticWorkspace,
    mass=0.0,
    time: float = 0.0,
) -> ModelState:
    """Self-starting state: faces interpolated from centers, velocities from
    the elliptic solve, history seeded with the t=0 values."""
    qc = np.asarray(qc, dtype=np.float64)
    psi, consts = invert_pv(qc, ws, mass)
    u, v = velocities_from_psi(psi, consts, grid, params.U)
    qxf, qyf = faces_from_centers(qc)
    mass_arr = np.broadcast_to(np.asarray(mass, dtype=np.float64), qc.shape[:-3]).copy()
    return ModelState(
        grid=grid, qc=qc.copy(), qxf=qxf, qyf=qyf, u=u, v=v,
        u_half=u.copy(), v_half=v.copy(),
        r_prev=beta_term(v, params.beta),
        mass=mass_arr, time=time, step_index=0,
    )


def advective_divergence(
    qxf: np.ndarray, qyf: np.ndarray, u: np.ndarray, v: np.ndarray, grid: Grid
) -> np.ndarray:
    """Conservative flux divergence F = -(Dx[u q] + Dy[v q]) at cell centers."""
    fx = u * qxf
    fy = v * qyf
    return -(
        (np.roll(fx, -1, axis=-1) - fx) / grid.dx
        + (fy[..., 1:, :] - fy[..., :-1, :]) / grid.dy
    )


def max_courant(u: np.ndarray, v: np.ndarray, grid: Grid, dt: float) -> np.ndarray:
    """Per-member advective Courant number (max over faces and layers)."""
    cu = np.abs(u).max(axis=(-3, -2, -1)) * dt / grid.dx
    cv = np.abs(v).max(axis=(-3, -2, -1)) * dt / grid.dy
    return np.maximum(cu, cv)


def check_cfl(u, v, grid, params: ModelParams, time: float) -> None:
    c = max_courant(u, v, grid, params.dt)
    if np.any(c > params.cfl_limit):
        flat = np.atleast_1d(c)
        worst = int(np.argmax(flat))
        member = worst if flat.size > 1 else None
        raise CflError(float(flat[worst]), params.cfl_limit, time, member)


@dataclass
class PredictorResult:
    q_half: np.ndarray
    psi: np.ndarray
    wall_constants: np.ndarray
    u_half: np.ndarray    # new half-step face velocities
    v_half: np.ndarray
    r_now: np.ndarray


def _viscous_forcing(
    q_star: np.ndarray, psi: np.ndarray, consts: np.ndarray,
    params: ModelParams, ws: EllipticWorkspace,
) -> np.ndarray:
    """nu*lap^2(psi) - mu*lap(psi) on layer 2.

    lap(psi) is recovered exactly from the elliptic relation just solved;
    the outer Laplacian uses the 5-point stencil with a one-sided shift at
    the wall rows.
    """
    if params.nu == 0.0 and params.mu == 0.0:
        return np.zeros_like(q_star)
    strat, grid = ws.strat, ws.grid
    psi1, psi2 = psi[..., 0, :, :], psi[..., 1, :, :]
    coupling = np.stack(
        [strat.s1 * (psi2 - psi1), strat.s2 * (psi1 - psi2)], axis=-3
    )
    lap = q_star - coupling
    out = np.zeros_like(q_star)
    if params.nu != 0.0:
        lap2 = np.empty_like(lap)
        xpart = (np.roll(lap, 1, -1) - 2.0 * lap + np.roll(lap, -1, -1)) / grid.dx**2
        inv_dy2 = 1.0 / grid.dy**2
        lap2[..., 1:-1, :] = (lap[..., :-2, :] - 2.0 * lap[..., 1:-1, :] + lap[..., 2:, :]) * inv_dy2
        lap2[..., 0, :] = (lap[..., 0, :] - 2.0 * lap[..., 1, :] + lap[..., 2, :]) * inv_dy2
        lap2[..., -1, :] = (lap[..., -1, :] - 2.0 * lap[..., -2, :] + lap[..., -3, :]) * inv_dy2
        lap2 += xpart
        out += params.nu * lap2
    if params.mu != 0.0:
        out[..., 1, :, :] -= params.mu * lap[..., 1, :, :]
    return out


def predictor(
    state: ModelState, params: ModelParams, ws: EllipticWorkspace,
    extra_tendency: np.ndarray | None = None,
) -> PredictorResult:
    """Half-step centers, the half-step elliptic solve, and new face
    velocities.  ``extra_tendency`` injects the transport-noise term of the
    stochastic scheme (already scaled; added once, like the beta term)."""
    grid, dt = state.grid, params.dt
    flux_div = advective_divergence(state.qxf, state.qyf, state.u, state.v, grid)
    r_now = beta_term(state.v, params.beta)
    f_beta = 1.5 * r_now - 0.5 * state.r_prev
    q_star = state.qc + (0.5 * dt) * flux_div + dt * f_beta
    if extra_tendency is not None:
        q_star = q_star + extra_tendency
    psi, consts = invert_pv(q_star, ws, state.mass)
    q_half = q_star + dt * _viscous_forcing(q_star, psi, consts, params, ws)
    u_half, v_half = velocities_from_psi(psi, consts, grid, params.U)
    return PredictorResult(q_half, psi, consts, u_half, v_half, r_now)


@dataclass
class ExtrapolatorResult:
    u_new: np.ndarray     # face velocities at the new time level
    v_new: np.ndarray
    qxf_new: np.ndarray   # limited upwinded face PV
    qyf_new: np.ndarray


def clip_minmax(
    candidate: np.ndarray,
    neighborhood_min: np.ndarray,
    neighborhood_max: np.ndarray,
    q_source: np.ndarray,
    dt: float,
) -> np.ndarray:
    """Clamp a face value into [min + dt*Q, max + dt*Q]."""
    lo = neighborhood_min + dt * q_source
    hi = neighborhood_max + dt * q_source
    return np.clip(candidate, lo, hi)


def _upwind_and_limit(
    state: ModelState,
    q_half: np.ndarray,
    dt: float,
    u_eff: np.ndarray,
    v_eff: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Upwind extrapolation of face PV followed by the min/max limiter.

    ``u_eff``/``v_eff`` pick the upwind side and enter the source estimate;
    they equal the new face velocities plus the transport-noise velocity in
    the stochastic scheme.
    """
    grid = state.grid
    qc, qxf, qyf = state.qc, state.qxf, state.qyf
    dtend = (q_half - qc) / (0.5 * dt)

    # x direction: cell c lies between faces c and (c+1) % nx
    up_x = u_eff >= 0.0
    from_left = np.roll(2.0 * q_half - qxf, 1, axis=-1)
    from_right = 2.0 * q_half - np.roll(qxf, -1, axis=-1)
    qxf_new = np.where(up_x, from_left, from_right)

    qxf_east = np.roll(qxf, -1, axis=-1)
    q_src_x = dtend + 0.5 * (u_eff + np.roll(u_eff, -1, axis=-1)) * (qxf_east - qxf) / grid.dx
    cell_lo_x = np.minimum(np.minimum(qxf, qxf_east), qc)
    cell_hi_x = np.maximum(np.maximum(qxf, qxf_east), qc)
    donor = lambda cell_arr: np.where(up_x, np.roll(cell_arr, 1, axis=-1), cell_arr)
    qxf_new = clip_minmax(qxf_new, donor(cell_lo_x), donor(cell_hi_x), donor(q_src_x), dt)

    # y direction: cell row r lies between faces r and r+1
    v_int = v_eff[..., 1:-1, :]
    up_y = v_int >= 0.0
    from_south = 2.0 * q_half[..., :-1, :] - qyf[..., :-2, :]
    from_north = 2.0 * q_half[..., 1:, :] - qyf[..., 2:, :]
    qyf_int = np.where(up_y, from_south, from_north)

    q_src_y = dtend + 0.5 * (v_eff[..., 1:, :] + v_eff[..., :-1, :]) * (
        qyf[..., 1:, :] - qyf[..., :-1, :]
    ) / grid.dy
    cell_lo_y = np.minimum(np.minimum(qyf[..., 1:, :], qyf[..., :-1, :]), qc)
    cell_hi_y = np.maximum(np.maximum(qyf[..., 1:, :], qyf[..., :-1, :]), qc)
    pick = lambda cell_arr: np.where(up_y, cell_arr[..., :-1, :], cell_arr[..., 1:, :])
    qyf_int = clip_minmax(qyf_int, pick(cell_lo_y), pick(cell_hi_y), pick(q_src_y), dt)

    qyf_new = np.empty_like(qyf)
    qyf_new[..., 1:-1, :] = qyf_int
    # wall rows carry no flux (v=0); fill by one-sided extrapolation
    qyf_new[..., 0, :] = q_half[..., 0, :]
    qyf_new[..., -1, :] = q_half[..., -1, :]
    return qxf_new, qyf_new


def extrapolator(
    state: ModelState,
    half: PredictorResult,
    params: ModelParams,
    noise_u: np.ndarray | None = None,
    noise_v: np.ndarray | None = None,
) -> ExtrapolatorResult:
    """New-time face velocities and limited upwinded face PV."""
    u_new = 1.5 * half.u_half - 0.5 * state.u_half
    v_new = 1.5 * half.v_half - 0.5 * state.v_half
    u_eff = u_new if noise_u is None else u_new + noise_u
    v_eff = v_new if noise_v is None else v_new + noise_v
    qxf_new, qyf_new = _upwind_and_limit(state, half.q_half, params.dt, u_eff, v_eff)
    return ExtrapolatorResult(u_new, v_new, qxf_new, qyf_new)


def corrector(
    q_half: np.ndarray,
    ext: ExtrapolatorResult,
    grid: Grid,
    dt: float,
    extra_tendency: np.ndarray | None = None,
) -> np.ndarray:
    """Second conservative half-step with the new face values."""
    q_new = q_half + (0.5 * dt) * advective_divergence(
        ext.qxf_new, ext.qyf_new, ext.u_new, ext.v_new, grid
    )
    if extra_tendency is not None:
        q_new = q_new + extra_tendency
    return q_new


def _assemble(state, params, half, ext, qc_new) -> ModelState:
    return ModelState(
        grid=state.grid,
        qc=qc_new,
        qxf=ext.qxf_new,
        qyf=ext.qyf_new,
        u=ext.u_new,
        v=ext.v_new,
        u_half=half.u_half,
        v_half=half.v_half,
        r_prev=half.r_now,
        mass=state.mass,
        time=state.time + params.dt,
        step_index=state.step_index + 1,
    )


def step(state: ModelState, params: ModelParams, ws: EllipticWorkspace) -> ModelState:
    """One deterministic CABARET step."""
    check_cfl(state.u, state.v, state.grid, params, state.time)
    half = predictor(state, params, ws)
    ext = extrapolator(state, half, params)
    check_cfl(ext.u_new, ext.v_new, state.grid, params, state.time)
    qc_new = corrector(half.q_half, ext, state.grid, params.dt)
    return _assemble(state, params, half, ext, qc_new)


def suggest_dt(
    state: ModelState, params: ModelParams, target_courant: float = 0.5
) -> float:
    """Largest dt keeping the current fields at or below ``target_courant``."""
    speed = max(float(np.abs(state.u).max()), 1e-12) / state.grid.dx
    speed = max(speed, float(np.abs(state.v).max()) / state.grid.dy)
    return target_courant / speed
