"""Stochastic CABARET step: transport noise in Stratonovich (Heun) form.

The noise enters the advection operator through K divergence-free face
velocity fields xi_k (one per Brownian mode, per layer).  Predictor and
corrector each add half of the conservative noise flux

    G_k(q) = -(Dx[xi_u_k q] + Dy[xi_v_k q])

scaled by the increment dW_k, plus the noise analogue of the beta source.
Upwinding and the limiter see the effective face velocity u + Xi with
Xi = sum_k xi_k dW_k.  A nudging drift lambda enters the corrector only,
by replacing dW_k with dW_k + lambda_k dt there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cabaret_det as det
from . import snapshots
from .cabaret_det import ModelParams, ModelState
from .elliptic import EllipticWorkspace, invert_pv, velocities_from_psi
from .grid import Grid

_MASK64 = (1 << 64) - 1

# counter-space tags so no two draw purposes ever collide
_TAG_STEP = 1
_TAG_JITTER = 2
_TAG_OBS = 3
_TAG_RESAMPLE = 4
_TAG_MISC = 5


@dataclass(frozen=True)
class NoiseStream:
    """Counter-based random stream for one ensemble member.

    Draws are produced by a Philox generator keyed on (seed, member) with
    the block counter set from a (tag, index) pair, so any draw is a pure
    function of (seed, member, tag, index) regardless of thread scheduling
    or how many draws happened before it.
    """

    seed: int
    member: int = 0

    def _generator(self, tag: int, index: int) -> np.random.Generator:
        bg = np.random.Philox(
            key=[self.seed & _MASK64, self.member & _MASK64],
            counter=[0, index & _MASK64, tag & _MASK64, 0],
        )
        return np.random.Generator(bg)

    def step_increments(self, step_index: int, k: int, dt: float) -> np.ndarray:
        """Brownian increments dW ~ N(0, dt) for one model step, shape (k,)."""
        return self._generator(_TAG_STEP, step_index).normal(0.0, np.sqrt(dt), size=k)

    def window_increments(
        self, start_step: int, n_steps: int, k: int, dt: float
    ) -> np.ndarray:
        """Increments for ``n_steps`` consecutive steps, shape (n_steps, k)."""
        return np.stack(
            [self.step_increments(start_step + s, k, dt) for s in range(n_steps)]
        )

    def jitter_draws(self, ticket: int, n_steps: int, k: int, dt: float):
        """Fresh window increments plus one uniform for the accept test."""
        g = self._generator(_TAG_JITTER, ticket)
        dw = g.normal(0.0, np.sqrt(dt), size=(n_steps, k))
        return dw, float(g.uniform())

    def observation_normals(self, index: int, shape) -> np.ndarray:
        return self._generator(_TAG_OBS, index).standard_normal(shape)

    def uniform(self, index: int) -> float:
        return float(self._generator(_TAG_RESAMPLE, index).uniform())

    def generator(self, index: int = 0) -> np.random.Generator:
        """General-purpose generator (diagnostics, tie-breaks)."""
        return self._generator(_TAG_MISC, index)


@dataclass(frozen=True)
class XiBasis:
    """K divergence-free noise velocity fields on the staggered grid."""

    grid: Grid
    xu: np.ndarray  # (K, 2, ny, nx) x-face component per mode and layer
    xv: np.ndarray  # (K, 2, ny+1, nx) y-face component; wall rows vanish

    def __post_init__(self):
        ny, nx = self.grid.ny, self.grid.nx
        if self.xu.shape[1:] != (2, ny, nx) or self.xv.shape[1:] != (2, ny + 1, nx):
            raise ValueError("xi component shapes do not match the grid")
        if self.xu.shape[0] != self.xv.shape[0]:
            raise ValueError("xi components disagree on the mode count")
        if not (np.all(np.isfinite(self.xu)) and np.all(np.isfinite(self.xv))):
            raise ValueError("xi fields must be finite")

    @property
    def k(self) -> int:
        return self.xu.shape[0]


def divergence_defect(basis: XiBasis) -> float:
    """Max cell divergence, normalized by the basis speed scale."""
    g = basis.grid
    div = (np.roll(basis.xu, -1, axis=-1) - basis.xu) / g.dx + (
        basis.xv[..., 1:, :] - basis.xv[..., :-1, :]
    ) / g.dy
    scale = max(float(np.abs(basis.xu).max()), float(np.abs(basis.xv).max()), 1e-300)
    return float(np.abs(div).max()) * min(g.dx, g.dy) / scale


def xi_from_node_streams(zeta_nodes: np.ndarray, grid: Grid) -> XiBasis:
    """Derive face velocities from per-mode node stream functions.

    ``zeta_nodes`` is (K, 2, ny+1, nx) and must be constant (zero) along the
    wall rows; the forward differences then give exactly divergence-free
    faces with vanishing wall-normal components.
    """
    if np.abs(zeta_nodes[..., 0, :]).max() != 0.0 or \
       np.abs(zeta_nodes[..., -1, :]).max() != 0.0:
        raise ValueError("node stream functions must vanish on the walls")
    xu = (zeta_nodes[..., 1:, :] - zeta_nodes[..., :-1, :]) / grid.dy
    xv = -(np.roll(zeta_nodes, -1, axis=-1) - zeta_nodes) / grid.dx
    return XiBasis(grid=grid, xu=xu, xv=xv)


def synthesize_xi(
    grid: Grid,
    k: int,
    spectrum: float = 1.0,
    seed: int = 0,
    amplitude: float = 1.0,
    layer_ratio: float = 1.0 / 3.0,
) -> XiBasis:
    """Low-wavenumber trigonometric noise basis.

    Mode m (1-based) is a stream function A_m cos(2 pi kx x / Lx + phase)
    sin(pi ky y / Ly) with random phase, normalized so its peak face speed
    is ``amplitude * m**(-spectrum)``.  Layer 2 carries the same pattern
    scaled by ``layer_ratio``.  Deterministic in ``seed``.
    """
    if k < 1:
        raise ValueError("need at least one mode")
    pairs = [
        (kx, ky)
        for kx in range(0, max(grid.nx // 2 - 1, 1))
        for ky in range(1, grid.ny)
    ]
    pairs.sort(key=lambda p: (p[0] ** 2 + p[1] ** 2, p[0], p[1]))
    if k > len(pairs):
        raise ValueError(
            f"only {len(pairs)} distinct modes available on this grid, requested {k}"
        )
    rng = np.random.Generator(np.random.Philox(key=[seed & _MASK64, 0x5eed]))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=k)

    xn = np.arange(grid.nx) * grid.dx
    yn = np.arange(grid.ny + 1) * grid.dy
    zeta = np.zeros((k, 2, grid.ny + 1, grid.nx))
    for m, (kx, ky) in enumerate(pairs[:k]):
        phase = phases[m] if kx > 0 else 0.0
        zx = np.cos(2.0 * np.pi * kx * xn / grid.Lx + phase)
        zy = np.sin(np.pi * ky * yn / grid.Ly)
        zy[0] = 0.0
        zy[-1] = 0.0
        zeta[m, 0] = np.outer(zy, zx)
    base = xi_from_node_streams(zeta, grid)
    xu, xv = base.xu.copy(), base.xv.copy()
    for m in range(k):
        peak = max(np.abs(xu[m, 0]).max(), np.abs(xv[m, 0]).max(), 1e-300)
        scale = amplitude * (m + 1.0) ** (-spectrum) / peak
        xu[m, 0] *= scale
        xv[m, 0] *= scale
        xu[m, 1] = layer_ratio * xu[m, 0]
        xv[m, 1] = layer_ratio * xv[m, 0]
    return XiBasis(grid=grid, xu=xu, xv=xv)


DIVERGENCE_TOL = 1e-8


def save_xi(path, basis: XiBasis) -> None:
    """Persist a basis in the snapshot container.

    Records run mode-major: for each mode, per layer, the x-face component
    then the y-face component.  The y-face record stores rows 0..ny-1; the
    top wall row is zero by the basis invariant and is not written.
    """
    g = basis.grid
    if np.abs(basis.xv[..., -1, :]).max() != 0.0 or \
       np.abs(basis.xv[..., 0, :]).max() != 0.0:
        raise ValueError("wall rows of the y-face component must vanish")
    records = np.empty((basis.k * 4, g.ny, g.nx))
    for m in range(basis.k):
        for layer in range(2):
            records[4 * m + 2 * layer] = basis.xu[m, layer]
            records[4 * m + 2 * layer + 1] = basis.xv[m, layer, :-1, :]
    snapshots.write_snapshot(path, records, kind=snapshots.KIND_XI)


def load_xi(path, grid: Grid) -> XiBasis:
    """Load and validate a basis; a divergence defect above tolerance is an
    error, not a warning."""
    records, kind = snapshots.read_snapshot(path)
    if kind != snapshots.KIND_XI:
        raise snapshots.SnapshotFormatError(
            f"expected a noise-basis snapshot (kind {snapshots.KIND_XI}), got kind {kind}"
        )
    n_rec, ny, nx = records.shape
    if (ny, nx) != (grid.ny, grid.nx):
        raise snapshots.SnapshotFormatError(
            f"basis grid {nx}x{ny} does not match model grid {grid.nx}x{grid.ny}"
        )
    if n_rec % 4 != 0:
        raise snapshots.SnapshotFormatError(
            f"record count {n_rec} is not a multiple of 4 (mode x layer x component)"
        )
    k = n_rec // 4
    xu = np.empty((k, 2, ny, nx))
    xv = np.zeros((k, 2, ny + 1, nx))
    for m in range(k):
        for layer in range(2):
            xu[m, layer] = records[4 * m + 2 * layer]
            xv[m, layer, :-1, :] = records[4 * m + 2 * layer + 1]
    basis = XiBasis(grid=grid, xu=xu, xv=xv)
    defect = divergence_defect(basis)
    if defect > DIVERGENCE_TOL:
        raise ValueError(
            f"noise basis fails the divergence check: defect {defect:.3e} "
            f"exceeds {DIVERGENCE_TOL:.0e}"
        )
    return basis


def _xi_beta_cells(xv: np.ndarray, beta: float) -> np.ndarray:
    """Noise beta source per mode: -(beta/2)(xi_v north + xi_v south)."""
    return -0.5 * beta * (xv[..., 1:, :] + xv[..., :-1, :])


def _noise_velocity(basis: XiBasis, dw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Xi = sum_k xi_k dW_k on both face sets; dw is (..., K)."""
    xi_u = np.tensordot(dw, basis.xu, axes=([-1], [0]))
    xi_v = np.tensordot(dw, basis.xv, axes=([-1], [0]))
    return xi_u, xi_v


def _noise_tendency(
    qxf: np.ndarray,
    qyf: np.ndarray,
    xi_u: np.ndarray,
    xi_v: np.ndarray,
    params: ModelParams,
    grid: Grid,
) -> np.ndarray:
    """0.5 * sum_k (G_k(q) + G_k_beta) dW_k, with Xi already summed over k."""
    out = 0.5 * det.advective_divergence(qxf, qyf, xi_u, xi_v, grid)
    if params.beta != 0.0:
        csum = params.stoch_beta_coeffs[0] + params.stoch_beta_coeffs[1]
        out = out + 0.5 * csum * _xi_beta_cells(xi_v, params.beta)
    return out


@dataclass
class StepPhase:
    """A stochastic step paused after the limiter, before the corrector.

    Lets the particle filter inspect the per-mode corrector responses (for
    nudging) and then finish the step with a chosen drift lambda.
    """

    state: ModelState
    params: ModelParams
    ws: EllipticWorkspace
    basis: XiBasis
    dw: np.ndarray
    half: det.PredictorResult
    ext: det.ExtrapolatorResult

    def noise_responses(self) -> np.ndarray:
        """Per-mode corrector response fields B_k = (G_k(q~) + G_k_beta)/2.

        Shape (..., K, 2, ny, nx); the corrector center update is
        A + sum_k B_k (dW_k + lambda_k dt).
        """
        g = self.state.grid
        qxf = self.ext.qxf_new[..., None, :, :, :]
        qyf = self.ext.qyf_new[..., None, :, :, :]
        b = 0.5 * det.advective_divergence(qxf, qyf, self.basis.xu, self.basis.xv, g)
        if self.params.beta != 0.0:
            csum = self.params.stoch_beta_coeffs[0] + self.params.stoch_beta_coeffs[1]
            b = b + 0.5 * csum * _xi_beta_cells(self.basis.xv, self.params.beta)
        return b

    def finish(self, lam: np.ndarray | None = None) -> ModelState:
        """Run the corrector; ``lam`` (..., K) nudges the corrector noise."""
        dw_eff = self.dw if lam is None else self.dw + lam * self.params.dt
        xi_u, xi_v = _noise_velocity(self.basis, dw_eff)
        noise_corr = _noise_tendency(
            self.ext.qxf_new, self.ext.qyf_new, xi_u, xi_v, self.params, self.state.grid
        )
        qc_new = det.corrector(
            self.half.q_half, self.ext, self.state.grid, self.params.dt, noise_corr
        )
        return det._assemble(self.state, self.params, self.half, self.ext, qc_new)


def begin_step(
    state: ModelState,
    params: ModelParams,
    ws: EllipticWorkspace,
    basis: XiBasis,
    dw: np.ndarray,
) -> StepPhase:
    """Predictor, elliptic solve, extrapolator and limiter of one stochastic
    step; the corrector is deferred to ``StepPhase.finish``."""
    dw = np.asarray(dw, dtype=np.float64)
    if dw.shape[-1] != basis.k:
        raise ValueError(f"increment count {dw.shape[-1]} != basis modes {basis.k}")
    grid = state.grid
    xi_u, xi_v = _noise_velocity(basis, dw)
    eff_u = state.u + xi_u / params.dt
    eff_v = state.v + xi_v / params.dt
    c = det.max_courant(eff_u, eff_v, grid, params.dt)
    if np.any(c > params.cfl_limit):
        flat = np.atleast_1d(c)
        worst = int(np.argmax(flat))
        raise det.CflError(
            float(flat[worst]), params.cfl_limit, state.time,
            worst if flat.size > 1 else None,
        )
    noise_pred = _noise_tendency(state.qxf, state.qyf, xi_u, xi_v, params, grid)
    half = det.predictor(state, params, ws, extra_tendency=noise_pred)
    # upwind switches and limiter bounds see the effective transport
    # velocity u + Xi/dt (Xi itself is the per-step noise displacement)
    ext = det.extrapolator(
        state, half, params, noise_u=xi_u / params.dt, noise_v=xi_v / params.dt
    )
    return StepPhase(state, params, ws, basis, dw, half, ext)


def stoch_step(
    state: ModelState,
    params: ModelParams,
    ws: EllipticWorkspace,
    basis: XiBasis,
    dw: np.ndarray,
    lam: np.ndarray | None = None,
) -> ModelState:
    """One stochastic CABARET step with increments ``dw`` (..., K).

    When ``lam`` is given the corrector stage sees dW + lambda dt (the
    nudged drift); everything before the corrector uses the plain dW.
    """
    if lam is not None and np.asarray(lam).shape[-1] != basis.k:
        raise ValueError("lambda length does not match the basis mode count")
    return begin_step(state, params, ws, basis, dw).finish(lam)


def heun_form_check(
    state: ModelState,
    params: ModelParams,
    ws: EllipticWorkspace,
    basis: XiBasis,
    dw: np.ndarray,
) -> dict:
    """Verify one stoch_step against the explicit Heun two-stage form.

    Rebuilds the step as q* = q^n + full-step tendencies (with the same
    increments), averages back to the half step, and reruns the face update
    and corrector.  Returns the max relative difference plus the magnitudes
    of the order-dt, order-dW, quadratic (dW dW) and leftover terms.
    """
    grid, dt = state.grid, params.dt
    reference = stoch_step(state, params, ws, basis, dw)

    # Heun route: full-step predictor combination, then average
    xi_u, xi_v = _noise_velocity(basis, dw)
    flux = det.advective_divergence(state.qxf, state.qyf, state.u, state.v, grid)
    r_now = det.beta_term(state.v, params.beta)
    f_beta = 1.5 * r_now - 0.5 * state.r_prev
    noise = _noise_tendency(state.qxf, state.qyf, xi_u, xi_v, params, grid)
    q_star_dry = state.qc + dt * flux + 2.0 * dt * f_beta + 2.0 * noise
    q_half_pre = 0.5 * (q_star_dry + state.qc)
    psi, consts = invert_pv(q_half_pre, ws, state.mass)
    fvisc = det._viscous_forcing(q_half_pre, psi, consts, params, ws)
    q_star = q_star_dry + 2.0 * dt * fvisc
    q_half = 0.5 * (q_star + state.qc)
    u_half, v_half = velocities_from_psi(psi, consts, grid, params.U)
    half = det.PredictorResult(q_half, psi, consts, u_half, v_half, r_now)
    ext = det.extrapolator(state, half, params, noise_u=xi_u / dt, noise_v=xi_v / dt)
    noise_corr = _noise_tendency(ext.qxf_new, ext.qyf_new, xi_u, xi_v, params, grid)
    q_heun = det.corrector(q_half, ext, grid, dt, noise_corr)

    scale = max(float(np.abs(reference.qc).max()), 1e-300)
    max_rel_diff = float(np.abs(reference.qc - q_heun).max()) / scale

    # term magnitudes of the expansion around q^n
    drift = dt * (flux + f_beta + fvisc)
    dw_term = 2.0 * noise
    # second application of the noise operator on the first-order noise kick
    kick_xf, kick_yf = det.faces_from_centers(dw_term)
    quad_term = 0.5 * det.advective_divergence(kick_xf, kick_yf, xi_u, xi_v, grid)
    return {
        "max_rel_diff": max_rel_diff,
        "dt_term": float(np.abs(drift).max()),
        "dw_term": float(np.abs(dw_term).max()),
        "quad_term": float(np.abs(quad_term).max()),
        "leftover": float(
            np.abs(reference.qc - state.qc - drift - dw_term - quad_term).max()
        ),
    }
