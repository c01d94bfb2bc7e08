"""Command-line entry points.

Subcommands: spinup, truth, xi-gen, xi-check, init-ensemble, assimilate,
metrics, convergence.  Exit codes: 0 success, 2 configuration error,
3 numerical or data failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import cabaret_det as det
from . import cabaret_stoch as stoch
from . import diagnostics as diag
from . import filter as pf
from . import harness
from . import snapshots
from .cabaret_det import CflError
from .elliptic import EllipticError, build_workspace
from .harness import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saltqg",
        description="Two-layer channel QG model with transport noise and "
        "particle-filter data assimilation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config file (INI)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")

    add_common(sub.add_parser("spinup", help="deterministic fine-grid spin-up"))
    add_common(sub.add_parser("truth", help="generate twin-experiment truth and observations"))

    p = sub.add_parser("xi-gen", help="synthesize and save the noise basis")
    add_common(p)
    p.add_argument("--file", default=None, help="basis file path (default <out>/xi_basis.qgf)")

    p = sub.add_parser("xi-check", help="validate a noise basis file")
    add_common(p)
    p.add_argument("--file", required=True, help="basis file to check")

    add_common(sub.add_parser("init-ensemble", help="build and snapshot the initial ensemble"))

    p = sub.add_parser("assimilate", help="run assimilation plus the paired free control")
    add_common(p)
    p.add_argument(
        "--algorithm",
        choices=["bootstrap", "tempered", "nudged", "free"],
        default="nudged",
    )

    add_common(sub.add_parser("metrics", help="summarize finished runs"))
    add_common(sub.add_parser("convergence", help="time-consistency convergence study"))
    return parser


def _cmd_spinup(cfg) -> int:
    path = harness.run_spinup(cfg)
    print(f"spin-up state written to {path}")
    return EXIT_OK


def _cmd_truth(cfg) -> int:
    truth_dir = harness.generate_truth(cfg)
    print(f"truth trajectory and observations written to {truth_dir}")
    return EXIT_OK


def _cmd_xi_gen(cfg, file) -> int:
    basis = harness.get_basis(cfg)
    path = file or os.path.join(cfg.out_dir, "xi_basis.qgf")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    stoch.save_xi(path, basis)
    print(f"noise basis with K={basis.k} written to {path} "
          f"(divergence defect {stoch.divergence_defect(basis):.3e})")
    return EXIT_OK


def _cmd_xi_check(cfg, file) -> int:
    basis = stoch.load_xi(file, cfg.signal_grid)
    print(f"{file}: OK, K={basis.k}, divergence defect "
          f"{stoch.divergence_defect(basis):.3e}")
    return EXIT_OK


def _cmd_init_ensemble(cfg) -> int:
    basis = harness.get_basis(cfg)
    ens = harness.init_ensemble(cfg, basis)
    sg = cfg.signal_grid
    path = os.path.join(cfg.out_dir, "initial_ensemble.qgf")
    snapshots.write_snapshot(
        path, ens.state.qc.reshape(-1, sg.ny, sg.nx), kind=snapshots.KIND_PV
    )
    ws = build_workspace(sg, cfg.strat)
    params = cfg.model_params(cfg.signal_dt_s)
    proj = pf.project_stations(ens.state, ws, cfg.stations(), params)
    print(f"ensemble of {ens.n} particles written to {path}; "
          f"mean station spread {proj.std(axis=0).mean():.3e} m/s")
    return EXIT_OK


def _cmd_assimilate(cfg, algorithm) -> int:
    basis = harness.get_basis(cfg)
    run_dir = harness.run_assimilation(cfg, algorithm, basis)
    print(f"{algorithm} run written to {run_dir}")
    if algorithm != "free":
        free_dir = harness.run_assimilation(cfg, "free", basis)
        print(f"paired free control written to {free_dir}")
        summary = harness.summarize_runs(cfg, [algorithm, "free"])
        for alg, entry in summary["algorithms"].items():
            print(f"  {alg}: mean station EME = {entry.get('mean_EME_stations', float('nan')):.4f}")
    return EXIT_OK


def _cmd_metrics(cfg) -> int:
    base = os.path.join(cfg.out_dir, "runs")
    if not os.path.isdir(base):
        raise ConfigError(f"no runs directory under {cfg.out_dir}")
    algorithms = sorted(
        d for d in os.listdir(base) if os.path.isdir(os.path.join(base, d))
    )
    if not algorithms:
        raise ConfigError("no finished runs to summarize")
    summary = harness.summarize_runs(cfg, algorithms)
    path = os.path.join(cfg.out_dir, "summary.json")
    harness._write_json(path, summary)
    print(f"summary written to {path}")
    for alg in algorithms:
        entry = summary["algorithms"][alg]
        print(
            f"  {alg:10s} EME(st) {entry.get('mean_EME_stations', float('nan')):.4f}  "
            f"EME(dom) {entry.get('mean_EME_domain', float('nan')):.4f}  "
            f"spread(final day) {entry.get('final_day_spread_std', float('nan')):.3e}"
        )
    return EXIT_OK


def _cmd_convergence(cfg) -> int:
    sg = harness.Grid(32, 16, cfg.lx_m, cfg.ly_m)
    ws = build_workspace(sg, cfg.strat)
    params = det.ModelParams(
        beta=0.0, nu=0.0, mu=0.0, U=(0.0, 0.0), dt=cfg.signal_dt_s
    )
    q0 = harness.perturbation_field(sg, cfg.perturb_q_per_s, cfg.seed)
    state = det.initial_state(sg, q0, params, ws, mass=0.0)
    basis = stoch.synthesize_xi(
        sg, 1, spectrum=cfg.spectrum, seed=cfg.seed, amplitude=cfg.amplitude_m_per_s
    )
    rep_det = diag.convergence_study(state, params, ws, None, cfg.seed, levels=4)
    rep_sto = diag.convergence_study(state, params, ws, basis, cfg.seed, levels=4)
    print("deterministic self-convergence:")
    for dt, err in zip(rep_det.dts, rep_det.errors):
        print(f"  dt={dt:9.1f}s  err={err:.6e}")
    print(f"  fitted order {rep_det.order:.3f}")
    print("stochastic self-convergence (single mode, fixed path):")
    for dt, err in zip(rep_sto.dts, rep_sto.errors):
        print(f"  dt={dt:9.1f}s  err={err:.6e}")
    print(f"  fitted order {rep_sto.order:.3f}")
    out = {
        "deterministic": {"dts": rep_det.dts.tolist(), "errors": rep_det.errors.tolist(),
                          "order": rep_det.order},
        "stochastic": {"dts": rep_sto.dts.tolist(), "errors": rep_sto.errors.tolist(),
                       "order": rep_sto.order},
    }
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "convergence.json"), "w") as fh:
        json.dump(out, fh, indent=2)
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = harness.load_config(args.config, seed=args.seed, out_dir=args.out)
        if args.command == "spinup":
            return _cmd_spinup(cfg)
        if args.command == "truth":
            return _cmd_truth(cfg)
        if args.command == "xi-gen":
            return _cmd_xi_gen(cfg, args.file)
        if args.command == "xi-check":
            return _cmd_xi_check(cfg, args.file)
        if args.command == "init-ensemble":
            return _cmd_init_ensemble(cfg)
        if args.command == "assimilate":
            return _cmd_assimilate(cfg, args.algorithm)
        if args.command == "metrics":
            return _cmd_metrics(cfg)
        if args.command == "convergence":
            return _cmd_convergence(cfg)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CflError, EllipticError, snapshots.SnapshotFormatError, ValueError,
            FileNotFoundError, RuntimeError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
