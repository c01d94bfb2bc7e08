"""Synthetic observations, noise scales, likelihood and Girsanov weights.

Stations observe the layer-1 velocity at their signal-grid cell.  Per
station the noise scale sigma has one value per component (u, v); both
components enter the squared norm of the log-likelihood.  All weight
arithmetic is done in log space.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid, StationSet

SIGMA_FLOOR = 1e-6  # m/s


@dataclass(frozen=True)
class ObservationRecord:
    time: float                # seconds
    stations: StationSet
    values: np.ndarray         # (M, 2) observed (u, v), m/s
    sigma: np.ndarray          # (M, 2) noise scales, m/s
    provenance: str = "fine-subcell-std"

    def __post_init__(self):
        m = self.stations.m
        if self.values.shape != (m, 2) or self.sigma.shape != (m, 2):
            raise ValueError("observation arrays must be (M, 2)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("observed values must be finite")
        if not np.all(self.sigma > 0):
            raise ValueError("noise scales must be positive")


@dataclass(frozen=True)
class WeightReport:
    log_weights: np.ndarray   # (N,) raw log-weights
    weights: np.ndarray       # (N,) normalized
    ess: float

    @classmethod
    def from_log_weights(cls, log_weights: np.ndarray) -> "WeightReport":
        lw = np.asarray(log_weights, dtype=np.float64)
        w = normalized_weights(lw)
        return cls(log_weights=lw, weights=w, ess=float(1.0 / np.sum(w**2)))


def normalized_weights(log_weights: np.ndarray) -> np.ndarray:
    """exp-normalize with max subtraction so far-off particles underflow
    gracefully instead of poisoning the sum."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.size == 0:
        raise ValueError("empty weight vector")
    shifted = lw - lw.max()
    w = np.exp(shifted)
    total = w.sum()
    if not total > 0:
        raise ValueError("all weights vanished")
    return w / total


def ess(weights: np.ndarray) -> float:
    """Effective sample size (sum of squared normalized weights, inverted)."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise ValueError("all weights are zero")
    wn = w / total
    return float(1.0 / np.sum(wn**2))


def ess_from_log(log_weights: np.ndarray) -> float:
    return float(1.0 / np.sum(normalized_weights(log_weights) ** 2))


def compute_sigma(
    u_fine: np.ndarray,
    v_fine: np.ndarray,
    fine_grid: Grid,
    coarse_grid: Grid,
    stations: StationSet,
) -> np.ndarray:
    """Per-station noise scales from sub-cell variability of the fine field.

    sigma is the population standard deviation of the fine-grid layer-1
    velocity samples inside the coarse cell containing each station,
    per component, floored at SIGMA_FLOOR.
    """
    rx = fine_grid.nx // coarse_grid.nx
    ry = fine_grid.ny // coarse_grid.ny
    if fine_grid.nx != rx * coarse_grid.nx or fine_grid.ny != ry * coarse_grid.ny:
        raise ValueError("fine grid must be an integer multiple of the coarse grid")

    def cell_std(f):
        blocks = f.reshape(coarse_grid.ny, ry, coarse_grid.nx, rx)
        return blocks.std(axis=(1, 3))

    su = cell_std(u_fine)[stations.iy, stations.ix]
    sv = cell_std(v_fine)[stations.iy, stations.ix]
    return np.maximum(np.stack([su, sv], axis=-1), SIGMA_FLOOR)


def compute_sigma_temporal(
    u_series: np.ndarray, v_series: np.ndarray, stations: StationSet
) -> np.ndarray:
    """Fallback noise scales: temporal std of station samples (T, ny, nx)."""
    su = u_series[:, stations.iy, stations.ix].std(axis=0)
    sv = v_series[:, stations.iy, stations.ix].std(axis=0)
    return np.maximum(np.stack([su, sv], axis=-1), SIGMA_FLOOR)


def observe_truth(
    truth_values: np.ndarray,
    stations: StationSet,
    sigma: np.ndarray,
    noise_stream,
    obs_index: int,
    time: float,
    provenance: str = "fine-subcell-std",
) -> ObservationRecord:
    """Noisy measurement Y = P(truth) + eta with eta ~ N(0, diag(sigma^2))."""
    truth_values = np.asarray(truth_values, dtype=np.float64)
    if truth_values.shape != (stations.m, 2):
        raise ValueError("truth projection must be (M, 2)")
    eta = sigma * noise_stream.observation_normals(obs_index, truth_values.shape)
    return ObservationRecord(
        time=time, stations=stations, values=truth_values + eta,
        sigma=np.asarray(sigma, dtype=np.float64), provenance=provenance,
    )


def log_likelihood_weight(predicted: np.ndarray, obs: ObservationRecord) -> np.ndarray:
    """log of the likelihood weight: -0.5 sum ((P(X) - Y) / sigma)^2.

    ``predicted`` is (..., M, 2); returns (...,).
    """
    resid = (predicted - obs.values) / obs.sigma
    return -0.5 * np.sum(resid**2, axis=(-2, -1))


def log_girsanov_weight(
    predicted: np.ndarray,
    obs: ObservationRecord,
    lam: np.ndarray,
    dw: np.ndarray,
    dt: float,
) -> np.ndarray:
    """Likelihood log-weight minus the nudging correction
    sum_k (lambda_k^2 dt/2 - lambda_k dW_k)."""
    lam = np.asarray(lam, dtype=np.float64)
    dw = np.asarray(dw, dtype=np.float64)
    if lam.shape[-1] != dw.shape[-1]:
        raise ValueError("lambda and dW disagree on the mode count")
    correction = np.sum(lam**2 * (0.5 * dt) - lam * dw, axis=-1)
    return log_likelihood_weight(predicted, obs) - correction


OBS_CSV_COLUMNS = (
    "time_s", "station_id", "x_m", "y_m", "u_obs", "v_obs", "sigma_u", "sigma_v"
)


def write_observations(path, records: list[ObservationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(OBS_CSV_COLUMNS)
        for rec in records:
            st = rec.stations
            for i in range(st.m):
                writer.writerow([
                    repr(rec.time), i, repr(float(st.x[i])), repr(float(st.y[i])),
                    repr(float(rec.values[i, 0])), repr(float(rec.values[i, 1])),
                    repr(float(rec.sigma[i, 0])), repr(float(rec.sigma[i, 1])),
                ])


def read_observations(path, grid: Grid, layout: str = "loaded") -> list[ObservationRecord]:
    """Rebuild observation records; station cells are recovered from the
    stored physical coordinates."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != OBS_CSV_COLUMNS:
            raise ValueError(f"unexpected observation CSV columns: {reader.fieldnames}")
        for row in reader:
            rows.append(row)
    by_time: dict[float, list[dict]] = {}
    for row in rows:
        by_time.setdefault(float(row["time_s"]), []).append(row)
    records = []
    for time in sorted(by_time):
        group = sorted(by_time[time], key=lambda r: int(r["station_id"]))
        x = np.array([float(r["x_m"]) for r in group])
        y = np.array([float(r["y_m"]) for r in group])
        stations = StationSet(
            ix=np.rint(x / grid.dx - 0.5).astype(int),
            iy=np.rint(y / grid.dy - 0.5).astype(int),
            x=x, y=y, layout=layout,
        )
        values = np.array([[float(r["u_obs"]), float(r["v_obs"])] for r in group])
        sigma = np.array([[float(r["sigma_u"]), float(r["sigma_v"])] for r in group])
        records.append(ObservationRecord(
            time=time, stations=stations, values=values, sigma=sigma,
            provenance="loaded",
        ))
    return records
