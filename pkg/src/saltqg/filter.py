"""Particle filtering: bootstrap, adaptive tempering with MCMC jittering,
and nudging with Girsanov-corrected weights.

An ensemble is one batched ModelState (leading axis = member slot) plus
per-slot counter-based noise streams.  Propagation, weighting and nudge
solves are per-particle and vectorized over the slot axis; resampling and
the temperature search are sequential barriers.  Every random draw is a
pure function of (seed, slot, purpose, counter), so a filter run is a pure
function of its configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import cabaret_det as det
from . import cabaret_stoch as stoch
from .cabaret_det import ModelParams, ModelState
from .cabaret_stoch import NoiseStream, XiBasis
from .elliptic import EllipticWorkspace, invert_pv, velocities_from_psi
from .grid import StationSet, center_velocities, sample_at_stations
from .observations import (
    ObservationRecord,
    WeightReport,
    ess_from_log,
    log_likelihood_weight,
    normalized_weights,
)

_FILTER_MEMBER = (1 << 32) + 7  # stream slot reserved for collective draws


@dataclass(frozen=True)
class FilterConfig:
    """Ensemble size and assimilation knobs."""

    n: int
    n_star: float
    dt_da: float                      # assimilation interval, s
    rho: float = 0.9999               # jitter correlation
    m1: int = 20                      # MCMC passes per tempering stage
    tempering: str = "incremental"    # or "literal"
    jitter_renudge: bool = False

    def __post_init__(self):
        if not (1 <= self.n_star <= self.n):
            raise ValueError("need 1 <= n_star <= n")
        if not (0.0 < self.rho < 1.0):
            raise ValueError("need 0 < rho < 1")
        if self.m1 < 0:
            raise ValueError("m1 must be nonnegative")
        if self.tempering not in ("incremental", "literal"):
            raise ValueError(f"unknown tempering mode {self.tempering!r}")
        if not self.dt_da > 0:
            raise ValueError("dt_da must be positive")


@dataclass
class Ensemble:
    """N stochastic-model states with their private noise streams."""

    state: ModelState                  # arrays carry leading axis N
    streams: list[NoiseStream]
    filter_stream: NoiseStream         # collective draws (resampling offsets)
    weights: np.ndarray                # (N,) normalized
    log_lik: np.ndarray                # (N,) likelihood of current states
    log_corr: np.ndarray               # (N,) Girsanov correction
    last_dw: np.ndarray                # (N, K) final-step increments
    last_lambda: np.ndarray            # (N, K) nudge drift of the final step
    window_start: ModelState | None = None
    window_dw: np.ndarray | None = None   # (N, n_steps, K)
    jitter_tickets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    resample_count: int = 0

    @property
    def n(self) -> int:
        return len(self.streams)

    def log_weights(self) -> np.ndarray:
        return self.log_lik + self.log_corr


def make_ensemble(base: ModelState, n: int, seed: int, k: int) -> Ensemble:
    """Replicate a single state into N slots with independent streams."""
    if base.batch_shape != ():
        raise ValueError("base state must be unbatched")
    kw = {}
    for name in ModelState._ARRAYS:
        arr = getattr(base, name)
        kw[name] = np.broadcast_to(arr, (n,) + arr.shape).copy()
    state = ModelState(grid=base.grid, time=base.time, step_index=base.step_index, **kw)
    return Ensemble(
        state=state,
        streams=[NoiseStream(seed=seed, member=i) for i in range(n)],
        filter_stream=NoiseStream(seed=seed, member=_FILTER_MEMBER),
        weights=np.full(n, 1.0 / n),
        log_lik=np.zeros(n),
        log_corr=np.zeros(n),
        last_dw=np.zeros((n, k)),
        last_lambda=np.zeros((n, k)),
        jitter_tickets=np.zeros(n, dtype=np.int64),
    )


def project_stations(
    state: ModelState,
    ws: EllipticWorkspace,
    stations: StationSet,
    params: ModelParams,
) -> np.ndarray:
    """Station velocities of a state, re-deriving psi from the current PV."""
    psi, consts = invert_pv(state.qc, ws, state.mass)
    u, v = velocities_from_psi(psi, consts, state.grid, params.U)
    uc, vc = center_velocities(u, v)
    return sample_at_stations(uc, vc, stations)


def girsanov_correction(lam: np.ndarray, dw: np.ndarray, dt: float) -> np.ndarray:
    """log-weight correction: -sum_k (lambda_k^2 dt/2 - lambda_k dW_k)."""
    return -np.sum(lam**2 * (0.5 * dt) - lam * dw, axis=-1)


# ---------------------------------------------------------------------------
# nudging


@dataclass(frozen=True)
class NudgeSystem:
    """Quadratic data of the per-particle drift optimization.

    ``b`` holds the station-projected responses of the corrector to a unit
    drift component (already scaled by 1/sigma), ``r`` the scaled residual
    of the un-nudged corrector against the observation.
    """

    b: np.ndarray    # (2M, K)
    r: np.ndarray    # (2M,)
    dt: float

    def __post_init__(self):
        if not (np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.r))):
            raise ValueError("nudge system entries must be finite")


def solve_nudge(system: NudgeSystem) -> np.ndarray:
    """Minimizer of the drift objective via its normal equations
    (dt^2 B'B + dt I) lambda = -dt B' r."""
    k = system.b.shape[1]
    gram = system.dt * (system.b.T @ system.b) + np.eye(k)
    return np.linalg.solve(gram, -(system.b.T @ system.r))


def nudge_objective(system: NudgeSystem, lam: np.ndarray) -> float:
    """The minimized functional: quadratic response + residual coupling +
    drift penalty; zero at lambda = 0."""
    blam = system.b @ lam
    return float(
        0.5 * system.dt**2 * np.dot(blam, blam)
        + system.dt * np.dot(system.r, blam)
        + 0.5 * system.dt * np.dot(lam, lam)
    )


def _linear_station_response(
    fields: np.ndarray,
    ws: EllipticWorkspace,
    stations: StationSet,
    grid,
) -> np.ndarray:
    """Station velocity response to PV perturbation fields (..., 2, ny, nx);
    purely linear: zero mass perturbation, no background flow."""
    psi, consts = invert_pv(fields, ws, 0.0)
    u, v = velocities_from_psi(psi, consts, grid, (0.0, 0.0))
    uc, vc = center_velocities(u, v)
    return sample_at_stations(uc, vc, stations)


def _nudged_final_step(
    st: ModelState,
    dw: np.ndarray,
    basis: XiBasis,
    params: ModelParams,
    ws: EllipticWorkspace,
    obs: ObservationRecord,
) -> tuple[ModelState, np.ndarray]:
    """Final window step with the corrector-stage drift, solved per particle."""
    phase = stoch.begin_step(st, params, ws, basis, dw)
    plain = phase.finish(None)
    proj = project_stations(plain, ws, obs.stations, params)       # (..., M, 2)
    b_fields = phase.noise_responses()                             # (..., K, 2, ny, nx)
    b_proj = _linear_station_response(b_fields, ws, obs.stations, st.grid)
    r_scaled = (proj - obs.values) / obs.sigma                     # (..., M, 2)
    b_scaled = b_proj / obs.sigma                                  # (..., K, M, 2)

    batch = st.batch_shape
    m2 = obs.stations.m * 2
    b_flat = b_scaled.reshape(batch + (basis.k, m2))
    r_flat = r_scaled.reshape(batch + (m2,))
    lam = np.zeros(batch + (basis.k,))
    for idx in np.ndindex(batch):
        system = NudgeSystem(b=b_flat[idx].T, r=r_flat[idx], dt=params.dt)
        lam[idx] = solve_nudge(system)
    return phase.finish(lam), lam


# ---------------------------------------------------------------------------
# propagation


def replay_window(
    start: ModelState,
    window_dw: np.ndarray,
    basis: XiBasis,
    params: ModelParams,
    ws: EllipticWorkspace,
    nudge_obs: ObservationRecord | None = None,
) -> tuple[ModelState, np.ndarray]:
    """Advance a window with explicit increments (..., n_steps, K).

    Returns the final state and the drift applied on the last step (zeros
    unless ``nudge_obs`` is given).
    """
    n_steps = window_dw.shape[-2]
    st = start
    for s in range(n_steps - 1):
        st = stoch.stoch_step(st, params, ws, basis, window_dw[..., s, :])
    final_dw = window_dw[..., -1, :]
    if nudge_obs is None:
        lam = np.zeros(window_dw.shape[:-2] + (basis.k,))
        return stoch.stoch_step(st, params, ws, basis, final_dw), lam
    return _nudged_final_step(st, final_dw, basis, params, ws, nudge_obs)


def propagate(
    ens: Ensemble,
    t0: float,
    t1: float,
    basis: XiBasis,
    params: ModelParams,
    ws: EllipticWorkspace,
    nudge_obs: ObservationRecord | None = None,
) -> None:
    """Advance every particle from t0 to t1, drawing each slot's increments
    from its own stream.  Caches the window start state and increments for
    jittering, and the final-step (dW, lambda) for the Girsanov weight.

    With ``nudge_obs`` given, the corrector of the final step before t1
    carries the likelihood-maximizing drift.
    """
    if abs(ens.state.time - t0) > 1e-6 * max(1.0, abs(t0)):
        raise ValueError(f"ensemble is at t={ens.state.time}, expected {t0}")
    span = t1 - t0
    n_steps = int(round(span / params.dt))
    if n_steps < 1 or abs(n_steps * params.dt - span) > 1e-6 * params.dt:
        raise ValueError("window must be a positive integer multiple of dt")

    start_step = ens.state.step_index
    window_dw = np.stack(
        [
            s.window_increments(start_step, n_steps, basis.k, params.dt)
            for s in ens.streams
        ]
    )
    ens.window_start = ens.state.copy()
    ens.window_dw = window_dw
    state, lam = replay_window(
        ens.window_start, window_dw, basis, params, ws, nudge_obs
    )
    ens.state = state
    ens.last_dw = window_dw[:, -1, :].copy()
    ens.last_lambda = lam
    ens.log_corr = girsanov_correction(lam, ens.last_dw, params.dt)


def weigh(
    ens: Ensemble,
    obs: ObservationRecord,
    params: ModelParams,
    ws: EllipticWorkspace,
) -> WeightReport:
    """Likelihood weights of the current states (Girsanov-corrected when the
    last window was nudged); refreshes the ensemble weight vector."""
    proj = project_stations(ens.state, ws, obs.stations, params)
    ens.log_lik = log_likelihood_weight(proj, obs)
    report = WeightReport.from_log_weights(ens.log_weights())
    ens.weights = report.weights
    return report


# ---------------------------------------------------------------------------
# resampling and tempering


def systematic_resample(
    weights: np.ndarray, uniform_draw: float, n_out: int | None = None
) -> np.ndarray:
    """Ancestor indices via systematic resampling with one stratified offset.

    Draws ``n_out`` ancestors (default: one per weight); every particle's
    offspring count differs from its expectation n_out * w_i by less than 1.
    """
    w = np.asarray(weights, dtype=np.float64)
    if not (0.0 <= uniform_draw < 1.0):
        raise ValueError("uniform draw must lie in [0, 1)")
    n_out = len(w) if n_out is None else n_out
    positions = (uniform_draw + np.arange(n_out)) / n_out
    cum = np.cumsum(w)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right").clip(max=len(w) - 1)


def resample_ensemble(ens: Ensemble, ancestors: np.ndarray) -> None:
    """Copy ancestor particles into the slots; slot streams stay private."""
    ens.state = ens.state.take(ancestors)
    if ens.window_start is not None:
        ens.window_start = ens.window_start.take(ancestors)
    if ens.window_dw is not None:
        ens.window_dw = ens.window_dw[ancestors].copy()
    ens.last_dw = ens.last_dw[ancestors].copy()
    ens.last_lambda = ens.last_lambda[ancestors].copy()
    ens.log_lik = ens.log_lik[ancestors].copy()
    ens.log_corr = ens.log_corr[ancestors].copy()
    ens.weights = np.full(ens.n, 1.0 / ens.n)
    ens.resample_count += 1


def find_tempering_steps(log_weights: np.ndarray, n_star: float) -> int:
    """Smallest integer p >= 1 with ESS(w^(1/p)) >= n_star, by doubling and
    integer bisection (ESS grows as the exponent shrinks)."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if ess_from_log(lw) >= n_star:
        return 1
    lo, hi = 1, 2
    while ess_from_log(lw / hi) < n_star:
        lo, hi = hi, hi * 2
        if hi > 1 << 62:
            raise RuntimeError("tempering exponent search failed to terminate")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ess_from_log(lw / mid) >= n_star:
            hi = mid
        else:
            lo = mid
    return hi


def jitter_mcmc(
    ens: Ensemble,
    obs: ObservationRecord,
    phi: float,
    rho: float,
    m1: int,
    basis: XiBasis,
    params: ModelParams,
    ws: EllipticWorkspace,
    renudge: bool = False,
) -> float:
    """M1 Metropolis-Hastings passes re-solving the window with correlated
    increments rho dW + sqrt(1-rho^2) dW~; returns the acceptance rate.

    Proposals follow the plain stochastic dynamics unless ``renudge`` is
    set; acceptance compares tempered Girsanov-corrected weights.
    """
    if m1 == 0:
        return 1.0
    if ens.window_start is None or ens.window_dw is None:
        raise RuntimeError("jittering needs a propagated window on record")
    if not (0.0 < rho <= 1.0):
        raise ValueError("need 0 < rho <= 1")
    n_steps = ens.window_dw.shape[1]
    mix = np.sqrt(max(0.0, 1.0 - rho * rho))

    proj = project_stations(ens.state, ws, obs.stations, params)
    ens.log_lik = log_likelihood_weight(proj, obs)

    accepted = 0
    nudge = obs if renudge else None
    for _ in range(m1):
        fresh = np.empty_like(ens.window_dw)
        uniforms = np.empty(ens.n)
        for i, stream in enumerate(ens.streams):
            fresh[i], uniforms[i] = stream.jitter_draws(
                int(ens.jitter_tickets[i]), n_steps, basis.k, params.dt
            )
            ens.jitter_tickets[i] += 1
        dw_prop = rho * ens.window_dw + mix * fresh

        prop_state, prop_lam = replay_window(
            ens.window_start, dw_prop, basis, params, ws, nudge
        )
        prop_proj = project_stations(prop_state, ws, obs.stations, params)
        prop_lik = log_likelihood_weight(prop_proj, obs)
        prop_corr = girsanov_correction(prop_lam, dw_prop[:, -1, :], params.dt)

        log_alpha = phi * ((prop_lik + prop_corr) - (ens.log_lik + ens.log_corr))
        with np.errstate(divide="ignore"):
            accept = (log_alpha >= 0.0) | (np.log(uniforms) < log_alpha)
        accepted += int(accept.sum())

        ens.state.overwrite_where(accept, prop_state)
        ens.window_dw[accept] = dw_prop[accept]
        ens.last_dw[accept] = dw_prop[accept, -1, :]
        ens.last_lambda[accept] = prop_lam[accept]
        ens.log_lik[accept] = prop_lik[accept]
        ens.log_corr[accept] = prop_corr[accept]
    return accepted / (m1 * ens.n)


# ---------------------------------------------------------------------------
# assimilation drivers


@dataclass
class AssimilationEvent:
    """One analysis step, as logged to the event CSV."""

    time: float
    algorithm: str
    ess_before: float
    p_stages: int = 0
    stage_ess: list[float] = field(default_factory=list)
    increments: list[Fraction] = field(default_factory=list)
    mcmc_accept_rate: float = float("nan")
    mean_abs_lambda: float = 0.0
    resampled: bool = False


def assimilate_bootstrap(
    ens: Ensemble,
    obs: ObservationRecord,
    cfg: FilterConfig,
    params: ModelParams,
    ws: EllipticWorkspace,
) -> AssimilationEvent:
    """Weigh; resample (systematic) only when the ESS drops below N*."""
    report = weigh(ens, obs, params, ws)
    event = AssimilationEvent(
        time=obs.time, algorithm="bootstrap", ess_before=report.ess,
        mean_abs_lambda=float(np.abs(ens.last_lambda).mean()),
    )
    if report.ess < cfg.n_star:
        draw = ens.filter_stream.uniform(ens.resample_count)
        resample_ensemble(ens, systematic_resample(report.weights, draw))
        event.resampled = True
    return event


def _tempered_analysis(
    ens: Ensemble,
    obs: ObservationRecord,
    cfg: FilterConfig,
    basis: XiBasis,
    params: ModelParams,
    ws: EllipticWorkspace,
    algorithm: str,
) -> AssimilationEvent:
    report = weigh(ens, obs, params, ws)
    event = AssimilationEvent(
        time=obs.time, algorithm=algorithm, ess_before=report.ess,
        mean_abs_lambda=float(np.abs(ens.last_lambda).mean()),
    )
    if report.ess >= cfg.n_star:
        return event

    p = find_tempering_steps(ens.log_weights(), cfg.n_star)
    event.p_stages = p
    event.resampled = True
    renudge = cfg.jitter_renudge and algorithm == "nudged"
    accept_rates = []
    for k in range(1, p + 1):
        phi_k = k / p
        increment = Fraction(1, p) if cfg.tempering == "incremental" else Fraction(k, p)
        event.increments.append(increment)
        stage_lw = ens.log_weights() * float(increment)
        stage_weights = normalized_weights(stage_lw)
        event.stage_ess.append(float(1.0 / np.sum(stage_weights**2)))
        draw = ens.filter_stream.uniform(ens.resample_count)
        resample_ensemble(ens, systematic_resample(stage_weights, draw))
        accept_rates.append(
            jitter_mcmc(ens, obs, phi_k, cfg.rho, cfg.m1, basis, params, ws, renudge)
        )
    event.mcmc_accept_rate = float(np.mean(accept_rates)) if accept_rates else float("nan")
    return event


def assimilate_tempered(
    ens: Ensemble,
    obs: ObservationRecord,
    cfg: FilterConfig,
    basis: XiBasis,
    params: ModelParams,
    ws: EllipticWorkspace,
) -> AssimilationEvent:
    """Adaptive tempering: p stages of reweigh/resample/jitter with the
    stage exponents summing to exactly one (incremental mode)."""
    return _tempered_analysis(ens, obs, cfg, basis, params, ws, "tempered")


def assimilate_nudged(
    ens: Ensemble,
    obs: ObservationRecord,
    cfg: FilterConfig,
    basis: XiBasis,
    params: ModelParams,
    ws: EllipticWorkspace,
) -> AssimilationEvent:
    """Analysis step after a nudged propagation: identical to the tempered
    driver except that the cached Girsanov corrections (from the nudged
    final step) enter every weight."""
    return _tempered_analysis(ens, obs, cfg, basis, params, ws, "nudged")
