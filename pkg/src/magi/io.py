"""Configuration parsing, observation CSV ingestion, result persistence.

File formats
------------
Config: a YAML mapping with the keys of :class:`~magi.pipeline.RunConfig`
(``system`` is required; ``sigma_known`` maps component names to known
noise sds).  Unknown keys are rejected.

Observations: CSV with header ``time,<comp1>,<comp2>,...``.  An empty cell
means the component was not observed at that time; an entirely empty column
marks an unobserved component.  Rows must be sorted by time with no
duplicates.

Results: ``params.csv`` (per-parameter summary), ``trajectory.csv`` (time,
per-component mean and 2.5/97.5 percentiles), ``chain.npz`` (raw draws,
layout documented in :func:`write_results`), ``run.json`` (config echo,
seed, versions, wall time, diagnostics) and one rendered figure per
component next to the tables.  All numeric text output carries 17
significant digits so reloading is bit-exact.
"""

from __future__ import annotations

import json
import os
import platform
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .observations import ObservationSet
from .pipeline import InferenceResult, RunConfig

__all__ = [
    "parse_config",
    "load_config",
    "load_observations",
    "write_observations",
    "write_results",
    "emit_plot_data",
    "load_run_config",
    "output_dir_default",
    "format_float",
]

OUTPUT_DIR_ENV = "MAGI_OUTPUT_DIR"

_CONFIG_KEYS = {
    "system",
    "seed",
    "data",
    "grid_times",
    "grid_refine",
    "beta",
    "band_size",
    "total_iterations",
    "burn_in",
    "leapfrog_steps",
    "base_step",
    "sigma_known",
    "keep_chain",
    "dry_run",
}


def format_float(x) -> str:
    """Render a float with 17 significant digits (round-trip exact)."""
    return f"{float(x):.17g}"


def output_dir_default() -> Path:
    """Default output directory, overridable via the environment."""
    return Path(os.environ.get(OUTPUT_DIR_ENV, "magi-output"))


def parse_config(text: str) -> RunConfig:
    """Parse a YAML config document into a validated RunConfig."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of option names to values")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "system" not in raw or not raw["system"]:
        raise ConfigError("config must name a system")
    if "grid_times" in raw and raw["grid_times"] is not None:
        raw["grid_times"] = tuple(float(t) for t in raw["grid_times"])
    if "sigma_known" in raw:
        sk = raw["sigma_known"]
        if not isinstance(sk, dict):
            raise ConfigError("sigma_known must map component names to noise sds")
        raw["sigma_known"] = {str(k): float(v) for k, v in sk.items()}
    try:
        return RunConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def load_observations(path, sigma_known: dict | None = None) -> ObservationSet:
    """Read an observation CSV; see the module docstring for the format.

    ``sigma_known`` optionally maps component names to known noise sds.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read observations {path}: {exc}") from exc
    if not lines:
        raise ConfigError(f"{path}: file is empty")
    header = [h.strip() for h in lines[0].split(",")]
    if len(header) < 2 or header[0] != "time":
        raise ConfigError(f"{path}:1: header must be 'time,<comp1>,...'")
    names = header[1:]
    n_comp = len(names)
    times = [[] for _ in range(n_comp)]
    values = [[] for _ in range(n_comp)]
    prev_t = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != n_comp + 1:
            raise ConfigError(
                f"{path}:{lineno}: expected {n_comp + 1} cells, got {len(cells)}"
            )
        try:
            t = float(cells[0])
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: non-numeric time '{cells[0]}'") from None
        if prev_t is not None:
            if t == prev_t:
                raise ConfigError(f"{path}:{lineno}: duplicate time {t:g}")
            if t < prev_t:
                raise ConfigError(f"{path}:{lineno}: times must be increasing")
        prev_t = t
        for d, cell in enumerate(cells[1:]):
            if cell == "":
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ConfigError(
                    f"{path}:{lineno}: non-numeric value '{cell}' in column {names[d]}"
                ) from None
            times[d].append(t)
            values[d].append(v)
    sigma_known = sigma_known or {}
    unknown = set(sigma_known) - set(names)
    if unknown:
        raise ConfigError(
            f"sigma_known names components not in {path}: {', '.join(sorted(unknown))}"
        )
    return ObservationSet(
        component_names=tuple(names),
        times=tuple(np.asarray(t) for t in times),
        values=tuple(np.asarray(v) for v in values),
        sigma_known=tuple(sigma_known.get(name) for name in names),
    )


def write_observations(observations: ObservationSet, path) -> Path:
    """Write an ObservationSet as the CSV format read by load_observations."""
    path = Path(path)
    all_times = observations.all_times()
    lookup = []
    for t_d, y_d in zip(observations.times, observations.values):
        lookup.append({float(t): float(y) for t, y in zip(t_d, y_d)})
    rows = ["time," + ",".join(observations.component_names)]
    for t in all_times:
        cells = [format_float(t)]
        for table in lookup:
            y = table.get(float(t))
            cells.append("" if y is None else format_float(y))
        rows.append(",".join(cells))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(rows) + "\n")
    return path


def _config_dict(config: RunConfig) -> dict:
    out = dict(vars(config))
    if out["grid_times"] is not None:
        out["grid_times"] = list(out["grid_times"])
    return out


def load_run_config(run_json_path) -> RunConfig:
    """Recover the RunConfig echoed into run.json."""
    meta = json.loads(Path(run_json_path).read_text())
    raw = meta["config"]
    if raw.get("grid_times") is not None:
        raw["grid_times"] = tuple(raw["grid_times"])
    return RunConfig(**raw)


def write_results(result: InferenceResult, out_dir, system=None) -> dict:
    """Persist one inference run; returns {name: path} of everything written.

    ``chain.npz`` layout: array ``positions`` of shape (iterations, dim)
    where a row is the flattened sampler state [x (D*n, row-major by
    component), theta (P), log sigma (free noise sds)]; present only when
    the run kept its chain.  ``theta_draws``/``sigma_draws`` hold the
    post-burn-in parameter and noise draws.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out_dir}: {exc}") from exc
    written = {}

    theta_names = _param_names(result, system)
    rows = ["parameter,mean,sd,q2.5,median,q97.5,ess"]
    for j, name in enumerate(theta_names):
        rows.append(
            ",".join(
                [name]
                + [
                    format_float(v)
                    for v in (
                        result.theta_mean[j],
                        result.theta_sd[j],
                        result.theta_lower[j],
                        result.theta_median[j],
                        result.theta_upper[j],
                        result.theta_ess[j],
                    )
                ]
            )
        )
    if result.sigma_mean is not None:
        for d, name in enumerate(_component_names(result, system)):
            rows.append(
                ",".join(
                    [f"sigma_{name}"]
                    + [format_float(result.sigma_mean[d])]
                    + [""] * 5
                )
            )
    params_path = out_dir / "params.csv"
    params_path.write_text("\n".join(rows) + "\n")
    written["params"] = params_path

    comp = _component_names(result, system)
    header = ["time"]
    for name in comp:
        header += [f"{name}_mean", f"{name}_q2.5", f"{name}_q97.5"]
    rows = [",".join(header)]
    for i, t in enumerate(result.grid_times):
        cells = [format_float(t)]
        for d in range(len(comp)):
            cells += [
                format_float(result.x_mean[d, i]),
                format_float(result.x_lower[d, i]),
                format_float(result.x_upper[d, i]),
            ]
        rows.append(",".join(cells))
    traj_path = out_dir / "trajectory.csv"
    traj_path.write_text("\n".join(rows) + "\n")
    written["trajectory"] = traj_path

    chain_arrays = {}
    if result.theta_draws is not None:
        chain_arrays["theta_draws"] = result.theta_draws
    if result.sigma_draws is not None:
        chain_arrays["sigma_draws"] = result.sigma_draws
    if result.chain_positions is not None:
        chain_arrays["positions"] = result.chain_positions
    if chain_arrays:
        chain_path = out_dir / "chain.npz"
        np.savez_compressed(chain_path, **chain_arrays)
        written["chain"] = chain_path

    meta = {
        "system": result.system_name,
        "seed": result.seed,
        "config": _config_dict(result.config),
        "beta": result.beta,
        "band_size": result.band_size,
        "w_i": result.w_i,
        "acceptance_rate": result.acceptance_rate,
        "runtime_seconds": result.runtime_seconds,
        "phi": [[g.phi1, g.phi2, g.nu] for g in result.phi],
        "mu": list(result.mu),
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "platform": platform.platform(),
        },
    }
    run_path = out_dir / "run.json"
    run_path.write_text(json.dumps(meta, indent=2, default=float) + "\n")
    written["run"] = run_path

    written.update(emit_plot_data(result, out_dir, system))
    return written


def emit_plot_data(result: InferenceResult, out_dir, system=None) -> dict:
    """Render one figure per component: posterior band over the grid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    t = result.grid_times
    for d, name in enumerate(_component_names(result, system)):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.fill_between(
            t, result.x_lower[d], result.x_upper[d], alpha=0.3, label="95% band"
        )
        ax.plot(t, result.x_mean[d], lw=1.5, label="posterior mean")
        ax.set_xlabel("time")
        ax.set_ylabel(name)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        path = out_dir / f"trajectory_{name}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written[f"figure_{name}"] = path
    return written


def _component_names(result: InferenceResult, system=None):
    if system is not None:
        return system.components
    from .systems import get_system, registered_systems

    if result.system_name in registered_systems():
        return get_system(result.system_name).components
    return tuple(f"x{d+1}" for d in range(result.x_mean.shape[0]))


def _param_names(result: InferenceResult, system=None):
    if system is not None:
        return system.param_names
    from .systems import get_system, registered_systems

    if result.system_name in registered_systems():
        return get_system(result.system_name).param_names
    return tuple(f"theta{j+1}" for j in range(result.theta_mean.size))
