"""Command-line interface.

Subcommands:

  simulate    write a simulated dataset (observations.csv + truth.json)
              for a named benchmark preset
  fit         run the inference pipeline on a dataset described by a
              config file; persist tables, chain, metadata, and figures
  evaluate    score a finished fit against a truth file (parameter and
              trajectory RMSE)
  replicate   simulate-and-fit many datasets for a benchmark preset and
              report aggregate RMSE tables

The default output directory is ``magi-output``, overridable with the
``MAGI_OUTPUT_DIR`` environment variable or ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import MagiError
from .integrate import parameter_rmse, trajectory_rmse
from .io import (
    format_float,
    load_config,
    load_observations,
    output_dir_default,
    write_observations,
    write_results,
)
from .pipeline import run_magi
from .replicate import get_preset, preset_names, replicate_preset
from .systems import get_system

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="magi",
        description="ODE parameter and trajectory inference without numerical integration",
    )
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="write a simulated benchmark dataset")
    p_sim.add_argument("preset", choices=preset_names())
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", type=Path, default=None)

    p_fit = sub.add_parser("fit", help="run inference on a dataset")
    p_fit.add_argument("--config", type=Path, required=True)
    p_fit.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_fit.add_argument("--band-size", type=int, default=None)
    p_fit.add_argument("--grid-refine", type=int, default=None)
    p_fit.add_argument("--beta", type=float, default=None)
    p_fit.add_argument("--dry-run", action="store_true", help="initialization only, no sampling")
    p_fit.add_argument("--out", type=Path, default=None)

    p_eval = sub.add_parser("evaluate", help="score a fit against a truth file")
    p_eval.add_argument("--run-dir", type=Path, required=True)
    p_eval.add_argument("--truth", type=Path, required=True)

    p_rep = sub.add_parser("replicate", help="multi-dataset benchmark replication")
    p_rep.add_argument("preset", choices=preset_names())
    p_rep.add_argument("--datasets", type=int, default=None)
    p_rep.add_argument("--seed", type=int, default=0)
    p_rep.add_argument("--jobs", type=int, default=1)
    p_rep.add_argument("--band-size", type=int, default=None)
    p_rep.add_argument("--grid-refine", type=int, default=None)
    p_rep.add_argument("--beta", type=float, default=None)
    p_rep.add_argument("--out", type=Path, default=None)

    return parser


def _resolve_out(arg, *parts) -> Path:
    base = Path(arg) if arg is not None else output_dir_default()
    return base.joinpath(*parts)


def _cmd_simulate(args) -> int:
    from .integrate import simulate_dataset

    preset = get_preset(args.preset)
    system = get_system(preset.sim_system)
    observations = simulate_dataset(
        system,
        preset.x0,
        preset.theta,
        preset.noise,
        preset.tau,
        seed=args.seed,
        sigma_known=preset.sigma_known,
    )
    out = _resolve_out(args.out, args.preset)
    out.mkdir(parents=True, exist_ok=True)
    write_observations(observations, out / "observations.csv")
    truth = {
        "system": preset.sim_system,
        "preset": args.preset,
        "seed": args.seed,
        "theta": list(preset.theta),
        "x0": list(preset.x0),
        "tau": [list(map(float, t)) for t in preset.tau],
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=2) + "\n")
    print(f"wrote {out / 'observations.csv'} and {out / 'truth.json'}")
    return 0


def _cmd_fit(args) -> int:
    config = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.band_size is not None:
        updates["band_size"] = args.band_size
    if args.grid_refine is not None:
        updates["grid_refine"] = args.grid_refine
    if args.beta is not None:
        updates["beta"] = args.beta
    if args.dry_run:
        updates["dry_run"] = True
    if updates:
        config = replace(config, **updates)
    if config.data is None:
        raise MagiError("config must point to a dataset via the 'data' key")
    system = get_system(config.system)
    sigma_known = dict(config.sigma_known)
    observations = load_observations(config.data, sigma_known or None)
    result = run_magi(observations, system, config)
    out = _resolve_out(args.out, f"fit-{config.system}")
    written = write_results(result, out, system=system)
    for name, path in sorted(written.items()):
        print(f"{name}: {path}")
    return 0


def _read_fit(run_dir: Path, system):
    params_path = run_dir / "params.csv"
    traj_path = run_dir / "trajectory.csv"
    theta = {}
    for line in params_path.read_text().splitlines()[1:]:
        cells = line.split(",")
        if cells[0] in system.param_names:
            theta[cells[0]] = float(cells[1])
    theta_hat = np.array([theta[name] for name in system.param_names])
    first = traj_path.read_text().splitlines()[1].split(",")
    x0_hat = np.array([float(first[1 + 3 * d]) for d in range(system.dim)])
    return theta_hat, x0_hat


def _cmd_evaluate(args) -> int:
    truth = json.loads(args.truth.read_text())
    system = get_system(truth["system"])
    theta_hat, x0_hat = _read_fit(args.run_dir, system)
    theta_true = np.asarray(truth["theta"], dtype=float)
    x0_true = np.asarray(truth["x0"], dtype=float)
    tau = [np.asarray(t, dtype=float) for t in truth["tau"]]
    p_rmse = parameter_rmse(theta_hat[None, :], theta_true)
    t_rmse = trajectory_rmse(theta_hat, x0_hat, theta_true, x0_true, system, tau)
    rows = ["kind,name,value"]
    for name, value in zip(system.param_names, p_rmse):
        print(f"parameter RMSE {name}: {value:.6g}")
        rows.append(f"parameter_rmse,{name},{format_float(value)}")
    for name, value in zip(system.components, t_rmse):
        print(f"trajectory RMSE {name}: {value:.6g}")
        rows.append(f"trajectory_rmse,{name},{format_float(value)}")
    (args.run_dir / "evaluation.csv").write_text("\n".join(rows) + "\n")
    return 0


def _cmd_replicate(args) -> int:
    out = _resolve_out(args.out, f"replicate-{args.preset}")
    report = replicate_preset(
        args.preset,
        n_datasets=args.datasets,
        seed=args.seed,
        jobs=args.jobs,
        out_dir=out,
        band_size=args.band_size,
        grid_refine=args.grid_refine,
        beta=args.beta,
    )
    print(report.summary_text())
    print(f"tables written under {out}")
    return 0 if report.n_failed == 0 else 1


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "evaluate": _cmd_evaluate,
    "replicate": _cmd_replicate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except MagiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
