"""Experiment orchestration: spin-up, twin-experiment truth, ensemble
initialization, assimilation runs, and metric emission.

A run directory is laid out as::

    out_dir/
      spinup_state.qgf        final fine-grid state (q1, q2, psi1, psi2)
      spinup_energy.csv
      spinup_manifest.json
      xi_basis.qgf            noise basis actually used
      truth/
        observations.csv
        psi_a_XXXX.qgf        coarse-grained truth stream function per cycle
        signal_init.qgf       coarse state at the start of the init window
        manifest.json
      runs/<algorithm>/
        metrics.csv           time_s, metric, mode, value
        events.csv            assimilation event log
        ranks_sNN_u.csv ...   rank histogram per station and component
        manifest.json

Everything is a pure function of the configuration file and the seed.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import cabaret_det as det
from . import cabaret_stoch as stoch
from . import diagnostics as diag
from . import filter as pf
from . import observations as obsm
from . import snapshots
from .cabaret_det import ModelParams
from .elliptic import (
    StratificationParams,
    apply_pv_operator,
    build_workspace,
    invert_pv,
    velocities_from_psi,
)
from .grid import Grid, StationSet, center_velocities, coarse_grain, make_equidistant_stations, sample_at_stations

ALGORITHMS = ("free", "bootstrap", "tempered", "nudged")


class ConfigError(ValueError):
    """Raised for invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    # domain and physics
    lx_m: float
    ly_m: float
    beta_per_m_s: float
    nu_m2_per_s: float
    mu_per_s: float
    u1_m_per_s: float
    u2_m_per_s: float
    s1_per_km2: float
    s2_per_km2: float
    f0_per_s: float
    # grids
    truth_nx: int
    truth_ny: int
    truth_dt_s: float
    signal_nx: int
    signal_ny: int
    signal_dt_s: float
    # stations
    station_rows: int
    station_cols: int
    # noise
    k_modes: int
    spectrum: float
    amplitude_m_per_s: float
    layer_ratio: float
    xi_path: str
    # filter
    n_particles: int
    n_star: float
    rho: float
    m1_mcmc: int
    tempering_mode: str
    jitter_renudge: bool
    # run
    seed: int
    spinup_days: float
    perturb_q_per_s: float
    init_window_hours: float
    assim_days: float
    assim_interval_hours: float
    out_dir: str

    def __post_init__(self):
        if self.truth_nx % self.signal_nx or self.truth_ny % self.signal_ny:
            raise ConfigError("truth grid must be an integer multiple of the signal grid")
        dt_da = self.assim_interval_hours * 3600.0
        for name, dt in (("signal", self.signal_dt_s), ("truth", self.truth_dt_s)):
            n = round(dt_da / dt)
            if n < 1 or abs(n * dt - dt_da) > 1e-6:
                raise ConfigError(
                    f"assimilation interval must be an integer multiple of the {name} dt"
                )
        if not (1 <= self.n_star <= self.n_particles):
            raise ConfigError("need 1 <= n_star <= n_particles")
        if self.assim_days <= 0 or self.init_window_hours < 0:
            raise ConfigError("run windows must be positive")

    @property
    def truth_grid(self) -> Grid:
        return Grid(self.truth_nx, self.truth_ny, self.lx_m, self.ly_m)

    @property
    def signal_grid(self) -> Grid:
        return Grid(self.signal_nx, self.signal_ny, self.lx_m, self.ly_m)

    @property
    def strat(self) -> StratificationParams:
        return StratificationParams.from_per_km2(self.s1_per_km2, self.s2_per_km2)

    @property
    def dt_da(self) -> float:
        return self.assim_interval_hours * 3600.0

    @property
    def n_cycles(self) -> int:
        return int(round(self.assim_days * 86400.0 / self.dt_da))

    def model_params(self, dt: float) -> ModelParams:
        return ModelParams(
            beta=self.beta_per_m_s,
            nu=self.nu_m2_per_s,
            mu=self.mu_per_s,
            U=(self.u1_m_per_s, self.u2_m_per_s),
            dt=dt,
        )

    def filter_config(self) -> pf.FilterConfig:
        return pf.FilterConfig(
            n=self.n_particles,
            n_star=self.n_star,
            dt_da=self.dt_da,
            rho=self.rho,
            m1=self.m1_mcmc,
            tempering=self.tempering_mode,
            jitter_renudge=self.jitter_renudge,
        )

    def stations(self) -> StationSet:
        return make_equidistant_stations(
            self.signal_grid, self.station_rows, self.station_cols
        )


_DEFAULTS = {
    ("domain", "lx_m"): "3.84e6",
    ("domain", "ly_m"): "1.92e6",
    ("physics", "beta_per_m_s"): "2.0e-11",
    ("physics", "nu_m2_per_s"): "3.125",
    ("physics", "mu_per_s"): "4.0e-8",
    ("physics", "u1_m_per_s"): "0.06",
    ("physics", "u2_m_per_s"): "0.0",
    ("physics", "s1_per_km2"): "4.22e-3",
    ("physics", "s2_per_km2"): "1.41e-3",
    ("physics", "f0_per_s"): "0.83e-4",
    ("truth_grid", "nx"): "130",
    ("truth_grid", "ny"): "66",
    ("truth_grid", "dt_s"): "1800",
    ("signal_grid", "nx"): "65",
    ("signal_grid", "ny"): "33",
    ("signal_grid", "dt_s"): "1800",
    ("stations", "rows"): "4",
    ("stations", "cols"): "4",
    ("noise", "k_modes"): "8",
    ("noise", "spectrum"): "1.0",
    ("noise", "amplitude_m_per_s"): "0.02",
    ("noise", "layer_ratio"): "0.3333333333333333",
    ("noise", "xi_path"): "",
    ("filter", "n_particles"): "20",
    ("filter", "n_star"): "16",
    ("filter", "rho"): "0.9999",
    ("filter", "m1_mcmc"): "5",
    ("filter", "tempering_mode"): "incremental",
    ("filter", "jitter_renudge"): "false",
    ("run", "seed"): "1234",
    ("run", "spinup_days"): "12",
    ("run", "perturb_q_per_s"): "1.0e-6",
    ("run", "init_window_hours"): "8",
    ("run", "assim_days"): "5",
    ("run", "assim_interval_hours"): "4",
    ("run", "out_dir"): "runs/desk",
}


def load_config(path, seed: int | None = None, out_dir: str | None = None) -> ExperimentConfig:
    """Parse an INI-style config; unknown keys are an error."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    known = {}
    for (section, key), default in _DEFAULTS.items():
        known.setdefault(section, {})[key] = default
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in known[section]:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")

    def get(section, key):
        return parser.get(section, key, fallback=_DEFAULTS[(section, key)])

    try:
        cfg = ExperimentConfig(
            lx_m=float(get("domain", "lx_m")),
            ly_m=float(get("domain", "ly_m")),
            beta_per_m_s=float(get("physics", "beta_per_m_s")),
            nu_m2_per_s=float(get("physics", "nu_m2_per_s")),
            mu_per_s=float(get("physics", "mu_per_s")),
            u1_m_per_s=float(get("physics", "u1_m_per_s")),
            u2_m_per_s=float(get("physics", "u2_m_per_s")),
            s1_per_km2=float(get("physics", "s1_per_km2")),
            s2_per_km2=float(get("physics", "s2_per_km2")),
            f0_per_s=float(get("physics", "f0_per_s")),
            truth_nx=int(get("truth_grid", "nx")),
            truth_ny=int(get("truth_grid", "ny")),
            truth_dt_s=float(get("truth_grid", "dt_s")),
            signal_nx=int(get("signal_grid", "nx")),
            signal_ny=int(get("signal_grid", "ny")),
            signal_dt_s=float(get("signal_grid", "dt_s")),
            station_rows=int(get("stations", "rows")),
            station_cols=int(get("stations", "cols")),
            k_modes=int(get("noise", "k_modes")),
            spectrum=float(get("noise", "spectrum")),
            amplitude_m_per_s=float(get("noise", "amplitude_m_per_s")),
            layer_ratio=float(get("noise", "layer_ratio")),
            xi_path=get("noise", "xi_path").strip(),
            n_particles=int(get("filter", "n_particles")),
            n_star=float(get("filter", "n_star")),
            rho=float(get("filter", "rho")),
            m1_mcmc=int(get("filter", "m1_mcmc")),
            tempering_mode=get("filter", "tempering_mode").strip(),
            jitter_renudge=get("filter", "jitter_renudge").strip().lower()
            in ("1", "true", "yes"),
            seed=int(get("run", "seed")),
            spinup_days=float(get("run", "spinup_days")),
            perturb_q_per_s=float(get("run", "perturb_q_per_s")),
            init_window_hours=float(get("run", "init_window_hours")),
            assim_days=float(get("run", "assim_days")),
            assim_interval_hours=float(get("run", "assim_interval_hours")),
            out_dir=get("run", "out_dir"),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = out_dir
    return cfg


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def total_energy(qc, psi, cell_area) -> float:
    """-(1/2) integral of sum_l q_l psi_l, the quadratic energy functional."""
    return float(-0.5 * np.sum(qc * psi) * cell_area)


def mass_integral(psi, cell_area) -> float:
    return float((psi[..., 0, :, :] - psi[..., 1, :, :]).sum() * cell_area)


def perturbation_field(grid: Grid, amplitude: float, seed: int) -> np.ndarray:
    """Smooth low-wavenumber random PV field to break the rest state."""
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x9e7]))
    x = grid.x_centers()[None, :] / grid.Lx
    y = grid.y_centers()[:, None] / grid.Ly
    q = np.zeros((2, grid.ny, grid.nx))
    for kx in range(1, 5):
        for ky in range(1, 4):
            amp = rng.normal(size=2) / (kx**2 + ky**2)
            phase = rng.uniform(0, 2 * np.pi, size=2)
            for layer in range(2):
                q[layer] += amp[layer] * np.sin(np.pi * ky * y) * np.cos(
                    2 * np.pi * kx * x + phase[layer]
                )
    peak = np.abs(q).max()
    if peak > 0:
        q *= amplitude / peak
    return q


def run_spinup(cfg: ExperimentConfig) -> str:
    """Deterministic fine-grid spin-up from a seeded small perturbation
    (exactly zero days keeps the initial field)."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    grid = cfg.truth_grid
    ws = build_workspace(grid, cfg.strat)
    params = cfg.model_params(cfg.truth_dt_s)
    q0 = perturbation_field(grid, cfg.perturb_q_per_s, cfg.seed)
    state = det.initial_state(grid, q0, params, ws, mass=0.0)

    n_steps = int(round(cfg.spinup_days * 86400.0 / params.dt))
    sample_every = max(1, int(round(21600.0 / params.dt)))  # 6-hourly series
    energy_rows = []

    def sample(st):
        psi, _ = invert_pv(st.qc, ws, st.mass)
        energy_rows.append([
            repr(st.time),
            repr(total_energy(st.qc, psi, grid.cell_area)),
            repr(float((st.qc[0] ** 2).sum() * grid.cell_area)),
            repr(float((st.qc[1] ** 2).sum() * grid.cell_area)),
        ])

    sample(state)
    for s in range(n_steps):
        state = det.step(state, params, ws)
        if (s + 1) % sample_every == 0 or s + 1 == n_steps:
            sample(state)

    psi, _ = invert_pv(state.qc, ws, state.mass)
    state_path = os.path.join(cfg.out_dir, "spinup_state.qgf")
    snapshots.write_snapshot(
        state_path,
        np.concatenate([state.qc, psi], axis=0),
        kind=snapshots.KIND_STATE,
    )
    with open(os.path.join(cfg.out_dir, "spinup_energy.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "energy", "enstrophy_1", "enstrophy_2"])
        writer.writerows(energy_rows)
    _write_json(os.path.join(cfg.out_dir, "spinup_manifest.json"), {
        "time_end_s": state.time,
        "mass": float(np.asarray(state.mass)),
        "steps": n_steps,
        "seed": cfg.seed,
        "grid": [grid.nx, grid.ny],
    })
    return state_path


def _coarse_truth_view(psi_f, consts, cfg, ws_signal):
    """Coarse-grained stream function plus its PV, mass, and velocities."""
    sg = cfg.signal_grid
    psi_a = coarse_grain(psi_f, cfg.truth_grid, sg)
    q_a = apply_pv_operator(psi_a, consts, cfg.strat, sg)
    mass_a = mass_integral(psi_a, sg.cell_area)
    u, v = velocities_from_psi(psi_a, consts, sg, (cfg.u1_m_per_s, cfg.u2_m_per_s))
    uc, vc = center_velocities(u, v)
    return psi_a, q_a, mass_a, uc, vc


def generate_truth(cfg: ExperimentConfig) -> str:
    """Continue the fine run through the init window and the assimilation
    span, emitting per-cycle coarse truth and noisy station observations."""
    truth_dir = os.path.join(cfg.out_dir, "truth")
    os.makedirs(truth_dir, exist_ok=True)
    grid = cfg.truth_grid
    sg = cfg.signal_grid
    ws_f = build_workspace(grid, cfg.strat)
    ws_s = build_workspace(sg, cfg.strat)
    params = cfg.model_params(cfg.truth_dt_s)
    stations = cfg.stations()

    fields, kind = snapshots.read_snapshot(os.path.join(cfg.out_dir, "spinup_state.qgf"))
    if kind != snapshots.KIND_STATE or fields.shape[0] != 4:
        raise ConfigError("spinup_state.qgf is not a state snapshot")
    q_f, psi_f0 = fields[:2], fields[2:]
    mass_f = mass_integral(psi_f0, grid.cell_area)

    t_init = cfg.init_window_hours * 3600.0
    state = det.initial_state(grid, q_f, params, ws_f, mass=mass_f, time=-t_init)

    # coarse state at the start of the init window, for the initial ensemble
    psi_f, consts = invert_pv(state.qc, ws_f, state.mass)
    psi_a, q_a, mass_a, _, _ = _coarse_truth_view(psi_f, consts, cfg, ws_s)
    snapshots.write_snapshot(
        os.path.join(truth_dir, "signal_init.qgf"),
        np.concatenate([q_a, psi_a], axis=0),
        kind=snapshots.KIND_STATE,
    )

    obs_stream = stoch.NoiseStream(seed=cfg.seed, member=(1 << 33) + 1)
    records = []
    cycle_meta = []

    def emit(st, cycle_index):
        psi_f, consts = invert_pv(st.qc, ws_f, st.mass)
        psi_a, q_a, mass_a, uc_a, vc_a = _coarse_truth_view(psi_f, consts, cfg, ws_s)
        u_f, v_f = velocities_from_psi(
            psi_f, consts, grid, (cfg.u1_m_per_s, cfg.u2_m_per_s)
        )
        ucf, vcf = center_velocities(u_f, v_f)
        sigma = obsm.compute_sigma(ucf[0], vcf[0], grid, sg, stations)
        truth_vals = sample_at_stations(uc_a, vc_a, stations)
        rec = obsm.observe_truth(
            truth_vals, stations, sigma, obs_stream, cycle_index, st.time
        )
        records.append(rec)
        snap = os.path.join(truth_dir, f"psi_a_{cycle_index:04d}.qgf")
        snapshots.write_snapshot(snap, psi_a, kind=snapshots.KIND_PSI)
        cycle_meta.append({
            "index": cycle_index,
            "time_s": st.time,
            "wall_constants": [float(consts[0]), float(consts[1])],
            "mass_signal": mass_a,
        })

    steps_per_cycle = int(round(cfg.dt_da / params.dt))
    init_steps = int(round(t_init / params.dt))
    for _ in range(init_steps):
        state = det.step(state, params, ws_f)
    state.time = 0.0  # quash accumulated float error at the window seam
    emit(state, 0)
    for cycle in range(1, cfg.n_cycles + 1):
        for _ in range(steps_per_cycle):
            state = det.step(state, params, ws_f)
        state.time = cycle * cfg.dt_da
        emit(state, cycle)

    obs_path = os.path.join(truth_dir, "observations.csv")
    obsm.write_observations(obs_path, records)
    _write_json(os.path.join(truth_dir, "manifest.json"), {
        "cycles": cycle_meta,
        "n_cycles": cfg.n_cycles,
        "dt_da_s": cfg.dt_da,
        "init_window_s": t_init,
        "observations_sha256": _sha256(obs_path),
        "signal_grid": [sg.nx, sg.ny],
        "seed": cfg.seed,
        "sigma_provenance": "fine-subcell-std",
    })
    return truth_dir


def get_basis(cfg: ExperimentConfig) -> stoch.XiBasis:
    """Load the basis named in the config, or synthesize it from the seed."""
    if cfg.xi_path:
        return stoch.load_xi(cfg.xi_path, cfg.signal_grid)
    return stoch.synthesize_xi(
        cfg.signal_grid,
        cfg.k_modes,
        spectrum=cfg.spectrum,
        seed=cfg.seed,
        amplitude=cfg.amplitude_m_per_s,
        layer_ratio=cfg.layer_ratio,
    )


def init_ensemble(cfg: ExperimentConfig, basis: stoch.XiBasis | None = None) -> pf.Ensemble:
    """Independent stochastic realizations over the init window, all started
    from the coarse-grained truth at its beginning."""
    truth_dir = os.path.join(cfg.out_dir, "truth")
    fields, kind = snapshots.read_snapshot(os.path.join(truth_dir, "signal_init.qgf"))
    if kind != snapshots.KIND_STATE or fields.shape[0] != 4:
        raise ConfigError("signal_init.qgf is not a state snapshot")
    q_a, psi_a = fields[:2], fields[2:]
    sg = cfg.signal_grid
    ws = build_workspace(sg, cfg.strat)
    params = cfg.model_params(cfg.signal_dt_s)
    t_init = cfg.init_window_hours * 3600.0
    mass_a = mass_integral(psi_a, sg.cell_area)
    base = det.initial_state(sg, q_a, params, ws, mass=mass_a, time=-t_init)
    basis = basis if basis is not None else get_basis(cfg)
    ens = pf.make_ensemble(base, cfg.n_particles, cfg.seed, basis.k)
    if t_init > 0:
        pf.propagate(ens, -t_init, 0.0, basis, params, ws)
        ens.state.time = 0.0
    return ens


@dataclass
class TruthData:
    records: list[obsm.ObservationRecord]
    psi: list[np.ndarray]          # coarse truth per cycle, (2, ny, nx)
    constants: list[np.ndarray]    # wall constants per cycle
    times: list[float]
    checksums: dict[str, str]


def load_truth(cfg: ExperimentConfig) -> TruthData:
    truth_dir = os.path.join(cfg.out_dir, "truth")
    with open(os.path.join(truth_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    obs_path = os.path.join(truth_dir, "observations.csv")
    records = obsm.read_observations(obs_path, cfg.signal_grid, layout="truth")
    psi, constants, times = [], [], []
    checksums = {"observations.csv": _sha256(obs_path)}
    for meta in manifest["cycles"]:
        snap = os.path.join(truth_dir, f"psi_a_{meta['index']:04d}.qgf")
        fields, kind = snapshots.read_snapshot(snap)
        if kind != snapshots.KIND_PSI:
            raise ConfigError(f"{snap} is not a stream-function snapshot")
        psi.append(fields)
        constants.append(np.asarray(meta["wall_constants"]))
        times.append(float(meta["time_s"]))
        checksums[os.path.basename(snap)] = _sha256(snap)
    return TruthData(records, psi, constants, times, checksums)


def _truth_center_velocities(cfg, psi_a, consts):
    u, v = velocities_from_psi(
        psi_a, consts, cfg.signal_grid, (cfg.u1_m_per_s, cfg.u2_m_per_s)
    )
    return center_velocities(u, v)


def _ensemble_center_velocities(cfg, ens, ws):
    psi, consts = invert_pv(ens.state.qc, ws, ens.state.mass)
    u, v = velocities_from_psi(
        psi, consts, cfg.signal_grid, (cfg.u1_m_per_s, cfg.u2_m_per_s)
    )
    return center_velocities(u, v)


def run_assimilation(
    cfg: ExperimentConfig, algorithm: str, basis: stoch.XiBasis | None = None
) -> str:
    """One full run (free, bootstrap, tempered, or nudged) over the
    assimilation span, emitting metric and event CSVs."""
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}")
    run_dir = os.path.join(cfg.out_dir, "runs", algorithm)
    os.makedirs(run_dir, exist_ok=True)

    sg = cfg.signal_grid
    ws = build_workspace(sg, cfg.strat)
    params = cfg.model_params(cfg.signal_dt_s)
    fcfg = cfg.filter_config()
    stations = cfg.stations()
    basis = basis if basis is not None else get_basis(cfg)
    truth = load_truth(cfg)
    ens = init_ensemble(cfg, basis)

    n = cfg.n_particles
    rank_hists: dict[tuple[int, int], diag.RankHistogram] = {
        (s, c): diag.RankHistogram.empty(n) for s in range(stations.m) for c in range(2)
    }
    rank_rng = stoch.NoiseStream(seed=cfg.seed, member=(1 << 34) + 3)

    metric_rows: list[list] = []
    events: list[pf.AssimilationEvent] = []

    def station_views(cycle_index: int):
        psi_a = truth.psi[cycle_index]
        consts = truth.constants[cycle_index]
        uc_a, vc_a = _truth_center_velocities(cfg, psi_a, consts)
        uc_e, vc_e = _ensemble_center_velocities(cfg, ens, ws)
        truth_st = sample_at_stations(uc_a, vc_a, stations)        # (M, 2)
        ens_st = sample_at_stations(uc_e, vc_e, stations)          # (N, M, 2)
        truth_dom = np.stack([uc_a[0], vc_a[0]])                   # layer 1
        ens_dom = np.stack([uc_e[:, 0], vc_e[:, 0]], axis=1)
        return truth_st, ens_st, truth_dom, ens_dom

    def record_metrics(cycle_index: int) -> None:
        time = truth.times[cycle_index]
        truth_st, ens_st, truth_dom, ens_dom = station_views(cycle_index)
        rows = [
            ("RB", "stations", diag.relative_bias(truth_st, ens_st)),
            ("EME", "stations", diag.ensemble_mean_error(truth_st, ens_st)),
            ("RB", "domain", diag.relative_bias(truth_dom, ens_dom)),
            ("EME", "domain", diag.ensemble_mean_error(truth_dom, ens_dom)),
            ("spread_std", "stations", float(ens_st.std(axis=0).mean())),
            ("spread_range", "stations",
             float((ens_st.max(axis=0) - ens_st.min(axis=0)).mean())),
            ("spread_q0595", "stations",
             float((np.quantile(ens_st, 0.95, axis=0)
                    - np.quantile(ens_st, 0.05, axis=0)).mean())),
        ]
        for metric, mode, value in rows:
            metric_rows.append([repr(time), metric, mode, repr(value)])

    def record_forecast_ranks(cycle_index: int) -> None:
        # forecast-observation pairs: the pre-analysis ensemble at the
        # observation time, one rank per station and component
        truth_st, ens_st, _, _ = station_views(cycle_index)
        gen = rank_rng.generator(cycle_index)
        for s in range(stations.m):
            for c in range(2):
                rank = diag.rank_of_truth(float(truth_st[s, c]), ens_st[:, s, c], gen)
                rank_hists[(s, c)].add(rank)

    record_metrics(0)
    for cycle in range(1, cfg.n_cycles + 1):
        obs = truth.records[cycle]
        t0, t1 = truth.times[cycle - 1], truth.times[cycle]
        nudge_obs = obs if algorithm == "nudged" else None
        pf.propagate(ens, t0, t1, basis, params, ws, nudge_obs=nudge_obs)
        ens.state.time = t1
        record_forecast_ranks(cycle)
        if algorithm == "bootstrap":
            events.append(pf.assimilate_bootstrap(ens, obs, fcfg, params, ws))
        elif algorithm == "tempered":
            events.append(pf.assimilate_tempered(ens, obs, fcfg, basis, params, ws))
        elif algorithm == "nudged":
            events.append(pf.assimilate_nudged(ens, obs, fcfg, basis, params, ws))
        if events:
            metric_rows.append(
                [repr(t1), "ESS", "-", repr(events[-1].ess_before)]
            )
        record_metrics(cycle)

    metrics_path = os.path.join(run_dir, "metrics.csv")
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "metric", "mode", "value"])
        writer.writerows(metric_rows)

    with open(os.path.join(run_dir, "events.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "time_s", "algorithm", "ess_before", "p_stages", "stage_ess",
            "mcmc_accept_rate", "mean_abs_lambda",
        ])
        for ev in events:
            writer.writerow([
                repr(ev.time), ev.algorithm, repr(ev.ess_before), ev.p_stages,
                "|".join(f"{e!r}" for e in ev.stage_ess),
                repr(ev.mcmc_accept_rate), repr(ev.mean_abs_lambda),
            ])

    for (s, c), hist in rank_hists.items():
        comp = "uv"[c]
        with open(os.path.join(run_dir, f"ranks_s{s:02d}_{comp}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin", "count"])
            for b, count in enumerate(hist.counts):
                writer.writerow([b, int(count)])

    snapshots.write_snapshot(
        os.path.join(run_dir, "final_ensemble.qgf"),
        ens.state.qc.reshape(-1, sg.ny, sg.nx),
        kind=snapshots.KIND_PV,
    )
    _write_json(os.path.join(run_dir, "manifest.json"), {
        "algorithm": algorithm,
        "seed": cfg.seed,
        "truth_checksums": truth.checksums,
        "n_particles": n,
        "k_modes": basis.k,
        "cycles": cfg.n_cycles,
    })
    return run_dir


def read_metrics(run_dir: str) -> dict[tuple[str, str], diag.MetricSeries]:
    """Load a metrics.csv back into per-(metric, mode) series."""
    series: dict[tuple[str, str], list[tuple[float, float]]] = {}
    with open(os.path.join(run_dir, "metrics.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["metric"], row["mode"])
            series.setdefault(key, []).append(
                (float(row["time_s"]), float(row["value"]))
            )
    out = {}
    for key, pairs in series.items():
        pairs.sort()
        out[key] = diag.MetricSeries(
            times=np.array([p[0] for p in pairs]),
            values=np.array([p[1] for p in pairs]),
            tag=key[0],
        )
    return out


def summarize_runs(cfg: ExperimentConfig, algorithms: list[str]) -> dict:
    """Cross-run summary: time-mean errors, final-day spread, rank-histogram
    flatness.  Asserts that all runs consumed identical truth files."""
    base_dir = os.path.join(cfg.out_dir, "runs")
    manifests = {}
    for alg in algorithms:
        with open(os.path.join(base_dir, alg, "manifest.json")) as fh:
            manifests[alg] = json.load(fh)
    checksums = [m["truth_checksums"] for m in manifests.values()]
    for other in checksums[1:]:
        if other != checksums[0]:
            raise RuntimeError("paired runs consumed different truth files")

    summary: dict = {"algorithms": {}, "truth_checksums_match": True}
    final_day_start = (cfg.assim_days - 1.0) * 86400.0
    for alg in algorithms:
        run_dir = os.path.join(base_dir, alg)
        series = read_metrics(run_dir)
        entry = {}
        for (metric, mode), ms in series.items():
            entry[f"mean_{metric}_{mode}"] = float(ms.values.mean())
        spread = series.get(("spread_std", "stations"))
        if spread is not None:
            late = spread.values[spread.times >= final_day_start]
            entry["final_day_spread_std"] = float(late.mean())
        chi = {}
        for name in sorted(os.listdir(run_dir)):
            if not name.startswith("ranks_"):
                continue
            counts = []
            with open(os.path.join(run_dir, name), newline="") as fh:
                for row in csv.DictReader(fh):
                    counts.append(int(row["count"]))
            hist = diag.RankHistogram(np.array(counts, dtype=np.int64), int(np.sum(counts)))
            chi[name[len("ranks_"):-len(".csv")]] = hist.chi_square()
        entry["rank_chi_square"] = chi
        summary["algorithms"][alg] = entry
    return summary
