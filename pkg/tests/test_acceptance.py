"""Benchmark replication targets at desk scale.

Each class replicates one benchmark scenario end to end -- simulate
datasets, run the full inference pipeline, score against the ground truth
-- and checks aggregate parameter / trajectory RMSEs against fixed limits.
These are long-running statistical tests; the datasets for each scenario
are shared across the checks through module-scoped fixtures.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from magi.replicate import replicate_preset

SEED = 0


def _ok(report):
    assert report.n_failed == 0, (
        f"{report.n_failed} of {len(report.outcomes)} datasets failed: "
        + "; ".join(o.error for o in report.outcomes if o.failed)
    )
    return report


@pytest.fixture(scope="module")
def fn_reports():
    """FN replication at three discretization levels over identical datasets."""
    return {
        refine: _ok(replicate_preset("fn", n_datasets=20, seed=SEED, grid_refine=refine))
        for refine in (1, 4, 8)
    }


@pytest.fixture(scope="module")
def hes1_report():
    return _ok(replicate_preset("hes1", n_datasets=20, seed=SEED))


@pytest.fixture(scope="module")
def pt_high_report():
    return _ok(replicate_preset("pt-high", n_datasets=20, seed=SEED))


@pytest.fixture(scope="module")
def fn_sparse_report():
    return _ok(replicate_preset("fn-sparse", n_datasets=10, seed=SEED))


class TestFnReplication:
    """20 datasets, 41 observations per component, |I| = 161."""

    def test_parameter_rmse(self, fn_reports):
        rmse = fn_reports[4].param_rmse
        assert rmse[0] <= 0.04   # a
        assert rmse[1] <= 0.30   # b
        assert rmse[2] <= 0.25   # c

    def test_trajectory_rmse(self, fn_reports):
        traj = fn_reports[4].mean_trajectory_rmse
        assert traj[0] <= 0.20   # V
        assert traj[1] <= 0.14   # R

    def test_runtime_per_dataset(self, fn_reports):
        runtimes = [o.runtime_seconds for o in fn_reports[4].outcomes]
        assert np.mean(runtimes) <= 600.0


class TestDiscretizationMonotonicity:
    """Denser constraint grids must improve the reconstruction."""

    def test_dense_strictly_better_than_coarse(self, fn_reports):
        coarse = fn_reports[1].mean_trajectory_rmse   # |I| = 41
        dense = fn_reports[4].mean_trajectory_rmse    # |I| = 161
        assert dense[0] < coarse[0]
        assert dense[1] < coarse[1]

    def test_densest_within_30_percent(self, fn_reports):
        dense = fn_reports[4].mean_trajectory_rmse    # |I| = 161
        densest = fn_reports[8].mean_trajectory_rmse  # |I| = 321
        assert np.all(densest <= 1.3 * dense)


class TestHes1UnobservedComponent:
    """20 datasets, asynchronous P/M observations, H never observed."""

    def test_trajectory_rmse(self, hes1_report):
        traj = hes1_report.mean_trajectory_rmse
        assert traj[0] <= 2.0    # P
        assert traj[1] <= 0.45   # M
        assert traj[2] <= 6.0    # H

    def test_parameter_rmse_identifiable_subset(self, hes1_report):
        # f and g are excluded: the trajectories are insensitive to them
        rmse = hes1_report.param_rmse
        assert rmse[0] <= 0.01   # a
        assert rmse[3] <= 0.01   # d


class TestProteinTransductionHighNoise:
    """20 datasets, sigma = 0.01, |I| = 201, band 40."""

    LIMITS = np.array([0.0122, 0.0043, 0.0167, 0.0135, 0.0136]) * 2.0

    def test_trajectory_rmse(self, pt_high_report):
        traj = pt_high_report.mean_trajectory_rmse
        assert np.all(traj <= self.LIMITS), f"trajectory RMSE {traj} > {self.LIMITS}"


class TestFnSparseObservations:
    """10 datasets, 21 observations per component, |I| = 321."""

    def test_trajectory_rmse(self, fn_sparse_report):
        traj = fn_sparse_report.mean_trajectory_rmse
        assert traj[0] <= 0.25   # V
        assert traj[1] <= 0.20   # R


class TestPropertySuiteRuntime:
    """The numerical property checks must stay fast enough to run routinely."""

    NODES = [
        "test_kernels.py::TestBuildConditioning",
        "test_kernels.py::TestMaternDerivatives",
        "test_posterior.py::TestGradient",
        "test_posterior.py::TestValue::test_beta_one_matches_untempered",
        "test_posterior.py::TestBandedEvaluation",
        "test_posterior.py::TestConstraintDiagnostic",
        "test_hmc.py::TestLeapfrog::test_reversibility",
        "test_hmc.py::TestLeapfrog::test_reversibility_with_boundary_reflection",
        "test_hmc.py::TestSamplingCorrectness",
        "test_integrate.py::TestRk4Solve::test_fourth_order_convergence",
        "test_pipeline.py::TestRunMagiDryRun::test_seeded_determinism",
    ]

    def test_property_checks_under_five_minutes(self):
        here = Path(__file__).parent
        start = time.perf_counter()
        proc = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider"]
            + [str(here / node) for node in self.NODES],
            capture_output=True,
            text=True,
            timeout=600,
        )
        elapsed = time.perf_counter() - start
        assert proc.returncode == 0, proc.stdout + proc.stderr
        assert elapsed < 300.0, f"property checks took {elapsed:.0f}s"
