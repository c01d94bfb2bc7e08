"""Verification metrics: relative errors, rank histograms, conserved
quantities, and the time-consistency convergence study."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import cabaret_det as det
from . import cabaret_stoch as stoch
from .cabaret_det import ModelParams, ModelState
from .elliptic import EllipticWorkspace


@dataclass(frozen=True)
class MetricSeries:
    times: np.ndarray
    values: np.ndarray
    tag: str

    def __post_init__(self):
        if len(self.times) != len(self.values):
            raise ValueError("times and values must align")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("metric values must be finite")


@dataclass
class RankHistogram:
    counts: np.ndarray     # (N+1,) bins
    samples: int = 0

    @classmethod
    def empty(cls, n_members: int) -> "RankHistogram":
        return cls(counts=np.zeros(n_members + 1, dtype=np.int64))

    def add(self, rank: int) -> None:
        self.counts[rank] += 1
        self.samples += 1

    def chi_square(self) -> float:
        """Flatness statistic against the uniform expectation."""
        if self.samples == 0:
            return 0.0
        expected = self.samples / len(self.counts)
        return float(np.sum((self.counts - expected) ** 2 / expected))


def relative_bias(truth: np.ndarray, ensemble: np.ndarray) -> float:
    """||truth - ensemble_mean|| / ||truth|| over flattened velocity vectors."""
    truth = np.asarray(truth, dtype=np.float64).ravel()
    members = np.asarray(ensemble, dtype=np.float64).reshape(len(ensemble), -1)
    norm = np.linalg.norm(truth)
    if norm == 0.0:
        raise ValueError("truth vector has zero norm")
    return float(np.linalg.norm(truth - members.mean(axis=0)) / norm)


def ensemble_mean_error(truth: np.ndarray, ensemble: np.ndarray) -> float:
    """(1/N) sum_n ||truth - member_n|| / ||truth||."""
    truth = np.asarray(truth, dtype=np.float64).ravel()
    members = np.asarray(ensemble, dtype=np.float64).reshape(len(ensemble), -1)
    norm = np.linalg.norm(truth)
    if norm == 0.0:
        raise ValueError("truth vector has zero norm")
    return float(np.mean(np.linalg.norm(truth - members, axis=1)) / norm)


def rank_of_truth(truth: float, members: np.ndarray, rng: np.random.Generator) -> int:
    """Rank of the truth in the sorted ensemble: members strictly below,
    plus a uniform draw over the tied positions."""
    members = np.asarray(members)
    below = int(np.sum(members < truth))
    ties = int(np.sum(members == truth))
    if ties:
        below += int(rng.integers(0, ties + 1))
    return below


def fit_order(dts: np.ndarray, errors: np.ndarray) -> float:
    """Least-squares slope of log(error) against log(dt)."""
    x = np.log(np.asarray(dts, dtype=np.float64))
    y = np.log(np.asarray(errors, dtype=np.float64))
    x = x - x.mean()
    return float(np.dot(x, y - y.mean()) / np.dot(x, x))


def dyadic_brownian_increments(
    seed: int, k: int, n_coarse: int, levels: int, dt_coarse: float
) -> list[np.ndarray]:
    """Consistent Brownian increments across dyadic refinements.

    The finest level is drawn directly; coarser levels are pairwise block
    sums, so every level samples the same underlying path (the discrete
    equivalent of bridge refinement).  Level l has n_coarse * 2**l steps.
    """
    n_fine = n_coarse * 2 ** (levels - 1)
    dt_fine = dt_coarse / 2 ** (levels - 1)
    gen = np.random.Generator(np.random.Philox(key=[seed, 0xb00b5]))
    fine = gen.normal(0.0, np.sqrt(dt_fine), size=(n_fine, k))
    out = []
    for level in range(levels):
        split = 2 ** (levels - 1 - level)
        out.append(fine.reshape(n_coarse * 2**level, split, k).sum(axis=1))
    return out


@dataclass
class ConvergenceReport:
    dts: np.ndarray
    errors: np.ndarray
    order: float


def convergence_study(
    state0: ModelState,
    params: ModelParams,
    ws: EllipticWorkspace,
    basis: stoch.XiBasis | None,
    seed: int,
    levels: int = 4,
    n_coarse: int = 4,
) -> ConvergenceReport:
    """Fixed-path self-convergence under dyadic time refinement.

    Runs the same window at levels of halved dt sharing one Brownian path,
    measures the RMS distance of each level's final PV field to the finest
    level, and fits the order.  With ``basis`` None the run is
    deterministic and the expected order is 2.
    """
    if levels < 3:
        raise ValueError("need at least 3 refinement levels")
    k = basis.k if basis is not None else 1
    increments = dyadic_brownian_increments(seed, k, n_coarse, levels, params.dt)
    finals = []
    for level in range(levels):
        dt_level = params.dt / 2**level
        p = replace(params, dt=dt_level)
        st = state0.copy()
        for s in range(n_coarse * 2**level):
            if basis is None:
                st = det.step(st, p, ws)
            else:
                st = stoch.stoch_step(st, p, ws, basis, increments[level][s])
        finals.append(st.qc)
    errors = np.array(
        [np.sqrt(np.mean((qc - finals[-1]) ** 2)) for qc in finals[:-1]]
    )
    dts = params.dt / 2 ** np.arange(levels - 1)
    return ConvergenceReport(dts=dts, errors=errors, order=fit_order(dts, errors))


def conservation_report(
    trajectory: list[ModelState], grid=None
) -> dict[str, MetricSeries]:
    """Domain integrals of q and q^2 per layer along a trajectory,
    normalized by their initial values (or by the initial integral of |q|
    when the initial integral vanishes)."""
    if not trajectory:
        raise ValueError("empty trajectory")
    g = grid or trajectory[0].grid
    times = np.array([st.time for st in trajectory])
    out: dict[str, MetricSeries] = {}
    q0 = trajectory[0].qc
    for layer in (0, 1):
        lin = np.array([st.qc[..., layer, :, :].sum() * g.cell_area for st in trajectory])
        quad = np.array([(st.qc[..., layer, :, :] ** 2).sum() * g.cell_area for st in trajectory])
        lin_scale = abs(lin[0])
        if lin_scale == 0.0:
            lin_scale = max(np.abs(q0[..., layer, :, :]).sum() * g.cell_area, 1e-300)
        out[f"q_integral_layer{layer + 1}"] = MetricSeries(times, lin / lin_scale, "conservation drift")
        quad_scale = quad[0] if quad[0] != 0.0 else 1.0
        out[f"enstrophy_layer{layer + 1}"] = MetricSeries(times, quad / quad_scale, "conservation drift")
    return out
