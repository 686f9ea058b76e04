"""Benchmark presets and the multi-dataset replication driver.

Each preset bundles a benchmark system's ground truth, observation
schedule, noise model, discretization, and sampler settings.  The driver
simulates datasets, runs the full inference pipeline on each, and reports
parameter and trajectory RMSEs aggregated across datasets (per-dataset
RMSEs averaged by the root-mean-square of squared errors for parameters,
and plain averaging of per-dataset trajectory RMSEs).
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, MagiError
from .integrate import NoiseModel, parameter_rmse, simulate_dataset, trajectory_rmse
from .io import format_float, write_observations, write_results
from .pipeline import RunConfig, run_magi
from .systems import get_system

logger = logging.getLogger(__name__)

__all__ = [
    "BenchmarkPreset",
    "DatasetOutcome",
    "ReplicationReport",
    "get_preset",
    "preset_names",
    "run_dataset",
    "replicate_preset",
]


@dataclass(frozen=True)
class BenchmarkPreset:
    """Ground truth plus inference settings for one benchmark scenario."""

    name: str
    sim_system: str              # system used for simulation / reconstruction
    fit_system: str              # system handed to the inference pipeline
    theta: tuple
    x0: tuple
    tau: tuple                   # per-component observation times
    noise: NoiseModel
    sigma_known: tuple           # per-component known sd or None
    grid_refine: int = 1
    grid_times: tuple | None = None
    leapfrog_steps: int = 100
    band_size: int | None = 20
    default_datasets: int = 20

    def run_config(self, seed, **overrides) -> RunConfig:
        base = dict(
            system=self.fit_system,
            seed=seed,
            grid_refine=self.grid_refine,
            grid_times=self.grid_times,
            leapfrog_steps=self.leapfrog_steps,
            band_size=self.band_size,
        )
        base.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig(**base)


def _fn_preset():
    tau = tuple(np.arange(0.0, 20.0 + 1e-9, 0.5) for _ in range(2))
    return BenchmarkPreset(
        name="fn",
        sim_system="fn",
        fit_system="fn",
        theta=(0.2, 0.2, 3.0),
        x0=(-1.0, 1.0),
        tau=tau,
        noise=NoiseModel(kind="additive", sd=(0.2, 0.2)),
        sigma_known=(None, None),
        grid_refine=4,           # 41 observation times refined to |I| = 161
        leapfrog_steps=100,
        band_size=20,
    )


def _fn_sparse_preset():
    tau = tuple(np.arange(0.0, 20.0 + 1e-9, 1.0) for _ in range(2))
    return replace(
        _fn_preset(),
        name="fn-sparse",
        tau=tau,
        grid_refine=16,          # 21 observation times refined to |I| = 321
        default_datasets=10,
    )


def _hes1_preset():
    tau_p = np.arange(0.0, 240.0 + 1e-9, 15.0)
    tau_m = np.arange(7.5, 232.5 + 1e-9, 15.0)
    return BenchmarkPreset(
        name="hes1",
        sim_system="hes1",
        fit_system="hes1-log",
        theta=(0.022, 0.3, 0.031, 0.028, 0.5, 20.0, 0.3),
        x0=(1.438575, 2.037488, 17.90385),
        tau=(tau_p, tau_m, np.empty(0)),
        noise=NoiseModel(kind="multiplicative", sd=(0.15, 0.15, 0.15)),
        sigma_known=(0.15, 0.15, None),   # sd of the log-scale additive noise
        grid_refine=1,           # discretization = union of observation times
        leapfrog_steps=500,
        band_size=20,
    )


def _pt_preset(sigma, name):
    tau_times = np.array(
        [0.0, 1, 2, 4, 5, 7, 10, 15, 20, 30, 40, 50, 60, 80, 100], dtype=float
    )
    grid = tuple(np.arange(0.0, 100.0 + 1e-9, 0.5))
    return BenchmarkPreset(
        name=name,
        sim_system="protein-transduction",
        fit_system="protein-transduction",
        theta=(0.07, 0.6, 0.05, 0.3, 0.017, 0.3),
        x0=(1.0, 0.0, 1.0, 0.0, 0.0),
        tau=tuple(tau_times for _ in range(5)),
        noise=NoiseModel(kind="additive", sd=(sigma,) * 5),
        sigma_known=(None,) * 5,
        grid_times=grid,         # |I| = 201
        leapfrog_steps=100,
        band_size=40,
    )


_PRESETS = {
    "fn": _fn_preset,
    "fn-sparse": _fn_sparse_preset,
    "hes1": _hes1_preset,
    "pt-low": lambda: _pt_preset(0.001, "pt-low"),
    "pt-high": lambda: _pt_preset(0.01, "pt-high"),
}


def preset_names():
    return tuple(sorted(_PRESETS))


def get_preset(name: str) -> BenchmarkPreset:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ConfigError(
            f"unknown benchmark preset '{name}'; choose from {', '.join(preset_names())}"
        ) from None


@dataclass
class DatasetOutcome:
    index: int
    seed: int
    theta_hat: np.ndarray | None
    trajectory_rmse: np.ndarray | None
    acceptance_rate: float
    runtime_seconds: float
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class ReplicationReport:
    preset: str
    outcomes: list
    param_rmse: np.ndarray | None       # per parameter, across datasets
    mean_trajectory_rmse: np.ndarray | None  # per component
    param_names: tuple
    component_names: tuple
    theta_true: np.ndarray

    @property
    def n_failed(self) -> int:
        return sum(o.failed for o in self.outcomes)

    def summary_text(self) -> str:
        lines = [f"preset: {self.preset}"]
        ok = [o for o in self.outcomes if not o.failed]
        lines.append(f"datasets: {len(self.outcomes)} ({self.n_failed} failed)")
        if self.param_rmse is not None:
            lines.append("parameter RMSE:")
            for name, value, truth in zip(
                self.param_names, self.param_rmse, self.theta_true
            ):
                lines.append(f"  {name:>8s}  {value:.4f}   (truth {truth:g})")
        if self.mean_trajectory_rmse is not None:
            lines.append("trajectory RMSE (mean over datasets):")
            for name, value in zip(self.component_names, self.mean_trajectory_rmse):
                lines.append(f"  {name:>8s}  {value:.4f}")
        if ok:
            mean_rt = np.mean([o.runtime_seconds for o in ok])
            mean_acc = np.mean([o.acceptance_rate for o in ok])
            lines.append(f"mean runtime per dataset: {mean_rt:.1f} s")
            lines.append(f"mean acceptance rate: {mean_acc:.2f}")
        return "\n".join(lines)


def run_dataset(preset: BenchmarkPreset, index: int, seed: int, out_dir=None, **overrides) -> DatasetOutcome:
    """Simulate one dataset, fit it, and score the fit against the truth."""
    sim_system = get_system(preset.sim_system)
    children = np.random.SeedSequence(seed).spawn(2)
    data_seed = int(children[0].generate_state(1)[0])
    fit_seed = int(children[1].generate_state(1)[0])
    observations = simulate_dataset(
        sim_system,
        preset.x0,
        preset.theta,
        preset.noise,
        preset.tau,
        seed=data_seed,
        sigma_known=preset.sigma_known,
    )
    config = preset.run_config(fit_seed, **overrides)
    try:
        result = run_magi(observations, preset.fit_system, config)
        traj = trajectory_rmse(
            result.theta_mean,
            result.x0_hat,
            np.asarray(preset.theta),
            np.asarray(preset.x0),
            sim_system,
            preset.tau,
        )
    except MagiError as exc:
        logger.warning("dataset %d failed: %s", index, exc)
        return DatasetOutcome(
            index=index,
            seed=seed,
            theta_hat=None,
            trajectory_rmse=None,
            acceptance_rate=float("nan"),
            runtime_seconds=float("nan"),
            error=str(exc),
        )
    if out_dir is not None:
        dataset_dir = Path(out_dir) / f"dataset-{index:03d}"
        write_observations(observations, dataset_dir / "observations.csv")
        write_results(result, dataset_dir, system=get_system(preset.fit_system))
    return DatasetOutcome(
        index=index,
        seed=seed,
        theta_hat=result.theta_mean,
        trajectory_rmse=traj,
        acceptance_rate=result.acceptance_rate,
        runtime_seconds=result.runtime_seconds,
    )


def _run_dataset_args(args):
    preset, index, seed, out_dir, overrides = args
    return run_dataset(preset, index, seed, out_dir, **overrides)


def replicate_preset(
    name_or_preset,
    n_datasets: int | None = None,
    seed: int = 0,
    jobs: int = 1,
    out_dir=None,
    **overrides,
) -> ReplicationReport:
    """Run the full multi-dataset replication for one benchmark preset.

    Dataset seeds derive only from ``seed`` and the dataset index, so runs
    with different inference settings (``grid_refine``, ``band_size``, ...)
    see identical datasets.
    """
    preset = (
        name_or_preset
        if isinstance(name_or_preset, BenchmarkPreset)
        else get_preset(name_or_preset)
    )
    if n_datasets is None:
        n_datasets = preset.default_datasets
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_datasets)]
    tasks = [(preset, i, s, out_dir, overrides) for i, s in enumerate(seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_dataset_args, tasks))
    else:
        outcomes = [_run_dataset_args(t) for t in tasks]

    sim_system = get_system(preset.sim_system)
    ok = [o for o in outcomes if not o.failed]
    param_rmse = mean_traj = None
    if ok:
        param_rmse = parameter_rmse(
            np.stack([o.theta_hat for o in ok]), np.asarray(preset.theta)
        )
        mean_traj = np.mean(np.stack([o.trajectory_rmse for o in ok]), axis=0)
    report = ReplicationReport(
        preset=preset.name,
        outcomes=outcomes,
        param_rmse=param_rmse,
        mean_trajectory_rmse=mean_traj,
        param_names=sim_system.param_names,
        component_names=sim_system.components,
        theta_true=np.asarray(preset.theta),
    )
    if out_dir is not None:
        _write_report(report, Path(out_dir))
    return report


def _write_report(report: ReplicationReport, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.txt").write_text(report.summary_text() + "\n")

    rows = ["kind,name,value"]
    if report.param_rmse is not None:
        for name, value in zip(report.param_names, report.param_rmse):
            rows.append(f"parameter_rmse,{name},{format_float(value)}")
    if report.mean_trajectory_rmse is not None:
        for name, value in zip(report.component_names, report.mean_trajectory_rmse):
            rows.append(f"trajectory_rmse,{name},{format_float(value)}")
    (out_dir / "summary.csv").write_text("\n".join(rows) + "\n")

    header = (
        ["dataset", "seed", "failed"]
        + [f"theta_{n}" for n in report.param_names]
        + [f"traj_rmse_{n}" for n in report.component_names]
        + ["acceptance_rate", "runtime_seconds"]
    )
    rows = [",".join(header)]
    for o in report.outcomes:
        cells = [str(o.index), str(o.seed), "1" if o.failed else "0"]
        if o.failed:
            cells += [""] * (len(report.param_names) + len(report.component_names) + 2)
        else:
            cells += [format_float(v) for v in o.theta_hat]
            cells += [format_float(v) for v in o.trajectory_rmse]
            cells += [format_float(o.acceptance_rate), format_float(o.runtime_seconds)]
        rows.append(",".join(cells))
    (out_dir / "datasets.csv").write_text("\n".join(rows) + "\n")

    if report.mean_trajectory_rmse is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        ok = [o for o in report.outcomes if not o.failed]
        data = np.stack([o.trajectory_rmse for o in ok])
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.boxplot(data, tick_labels=list(report.component_names))
        ax.set_ylabel("trajectory RMSE")
        ax.set_title(report.preset)
        fig.tight_layout()
        fig.savefig(out_dir / "trajectory_rmse.png", dpi=120)
        plt.close(fig)
