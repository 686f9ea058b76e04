"""Benchmark ODE right-hand sides, Jacobians, and the log-coordinate wrapper."""

import numpy as np
import pytest

from magi.errors import DomainError
from magi.systems import (
    ParamVector,
    f_eval,
    f_jacobians,
    fitzhugh_nagumo,
    get_system,
    hes1,
    log_transform,
    protein_transduction,
    registered_systems,
)

HES1_X0 = np.array([1.438575, 2.037488, 17.90385])
HES1_THETA = np.array([0.022, 0.3, 0.031, 0.028, 0.5, 20.0, 0.3])


def random_states(system, rng, count):
    """Random in-domain states, parameters, and times for a system."""
    for _ in range(count):
        if system.name.endswith("-log"):
            x = rng.uniform(-1.5, 1.5, system.dim)
        elif system.positive:
            x = rng.uniform(0.2, 5.0, system.dim)
        else:
            x = rng.uniform(-2.0, 2.0, system.dim)
        theta = np.empty(system.n_params)
        for j, (lo, hi) in enumerate(system.bounds):
            upper = hi if np.isfinite(hi) else 3.0
            theta[j] = rng.uniform(lo + 0.05, upper)
        yield x, theta, rng.uniform(0, 10)


def check_jacobians_fd(system, rng, count=100, h=1e-6, tol=1e-6):
    for x, theta, t in random_states(system, rng, count):
        jac_x, jac_theta = f_jacobians(system, x, theta, t)
        for j in range(system.dim):
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            fd = (f_eval(system, xp, theta, t) - f_eval(system, xm, theta, t)) / (2 * h)
            scale = np.maximum(np.abs(jac_x[:, j]), 1.0)
            assert np.all(np.abs(jac_x[:, j] - fd) <= tol * scale)
        for j in range(system.n_params):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            fd = (f_eval(system, x, tp, t) - f_eval(system, x, tm, t)) / (2 * h)
            scale = np.maximum(np.abs(jac_theta[:, j]), 1.0)
            assert np.all(np.abs(jac_theta[:, j] - fd) <= tol * scale)


class TestHandValues:
    def test_fn_at_reference_point(self):
        out = f_eval(fitzhugh_nagumo, np.array([-1.0, 1.0]), np.array([0.2, 0.2, 3.0]))
        assert out[0] == pytest.approx(1.0, abs=1e-12)
        assert out[1] == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_hes1_protein_nearly_stationary_at_x0(self):
        out = f_eval(hes1, HES1_X0, HES1_THETA)
        assert abs(out[0]) < 1e-3
        # x0 sits at the lowest P value: the derivative changes sign nearby
        below = f_eval(hes1, HES1_X0 - np.array([0.01, 0.0, 0.0]), HES1_THETA)
        above = f_eval(hes1, HES1_X0 + np.array([0.01, 0.0, 0.0]), HES1_THETA)
        assert np.sign(below[0]) != np.sign(above[0])

    def test_protein_transduction_at_initial_condition(self):
        x0 = np.array([1.0, 0.0, 1.0, 0.0, 0.0])
        theta = np.array([0.07, 0.6, 0.05, 0.3, 0.017, 0.3])
        out = f_eval(protein_transduction, x0, theta)
        assert np.allclose(out, [-0.67, 0.07, -0.6, 0.6, 0.0], atol=1e-12)

    def test_fn_jacobian_hand_values(self):
        jac_x, _ = f_jacobians(
            fitzhugh_nagumo, np.array([-1.0, 1.0]), np.array([0.2, 0.2, 3.0])
        )
        expected = np.array([[0.0, 3.0], [-1.0 / 3.0, -1.0 / 15.0]])
        assert np.allclose(jac_x, expected, atol=1e-12)

    def test_rate_constant_columns_are_linear(self):
        # f is linear in each rate constant, e.g. dS_d/dt = k1 * S
        rng = np.random.default_rng(0)
        x = rng.uniform(0.1, 2.0, 5)
        theta = rng.uniform(0.05, 1.0, 6)
        _, jac_theta = f_jacobians(protein_transduction, x, theta)
        assert jac_theta[1, 0] == pytest.approx(x[0])        # dS_d/dk1 = S
        assert jac_theta[3, 1] == pytest.approx(x[0] * x[2])  # dS_R/dk2 = S*R


class TestFiniteDifferenceJacobians:
    def test_fn(self):
        check_jacobians_fd(fitzhugh_nagumo, np.random.default_rng(10))

    def test_hes1(self):
        check_jacobians_fd(hes1, np.random.default_rng(11))

    def test_protein_transduction(self):
        check_jacobians_fd(protein_transduction, np.random.default_rng(12))

    def test_hes1_log(self):
        check_jacobians_fd(get_system("hes1-log"), np.random.default_rng(13))


class TestLogTransform:
    def test_chain_rule_identity(self):
        # exp(z) * g(z) recovers f(exp(z)) at 100 random points
        rng = np.random.default_rng(14)
        logged = get_system("hes1-log")
        for z, theta, t in random_states(logged, rng, 100):
            u = np.exp(z)
            recovered = u * f_eval(logged, z, theta, t)
            direct = f_eval(hes1, u, theta, t)
            scale = np.maximum(np.abs(direct), 1.0)
            assert np.all(np.abs(recovered - direct) <= 1e-10 * scale)

    def test_transformed_second_equation_closed_form(self):
        rng = np.random.default_rng(15)
        logged = get_system("hes1-log")
        for z, theta, t in random_states(logged, rng, 20):
            a, b, c, d, e, f, g = theta
            p_t, m_t = z[0], z[1]
            expected = -d + e * np.exp(-m_t) / (1.0 + np.exp(2.0 * p_t))
            out = f_eval(logged, z, theta, t)
            assert out[1] == pytest.approx(expected, rel=1e-12)

    def test_requires_strictly_positive_flag(self):
        with pytest.raises(ValueError):
            log_transform(fitzhugh_nagumo)

    def test_observation_maps(self):
        logged = get_system("hes1-log")
        values = np.array([0.5, 1.0, 7.0])
        assert np.allclose(logged.working_to_obs(logged.obs_to_working(values)), values)


class TestValidationAndRegistry:
    def test_registry_names(self):
        assert set(registered_systems()) == {
            "fn",
            "hes1",
            "hes1-log",
            "protein-transduction",
        }

    def test_unknown_system(self):
        with pytest.raises(KeyError, match="unknown system"):
            get_system("lorenz")

    def test_bounds(self):
        assert fitzhugh_nagumo.bounds == ((0.0, np.inf),) * 3
        assert hes1.bounds == ((0.0, np.inf),) * 7
        assert protein_transduction.bounds == ((0.0, 4.0),) * 6

    def test_param_vector_validation(self):
        with pytest.raises(ValueError):
            ParamVector(protein_transduction, [0.1, 0.1, 0.1, 0.1, 0.1, 5.0])
        values = ParamVector(fitzhugh_nagumo, [0.2, 0.2, 3.0])
        assert values.shape == (3,)

    def test_michaelis_menten_domain_error(self):
        x = np.array([1.0, 0.0, 1.0, 0.0, 0.0])   # R_pp = 0
        theta = np.array([0.07, 0.6, 0.05, 0.3, 0.017, 0.0])  # Km = 0
        with pytest.raises(DomainError):
            f_eval(protein_transduction, x, theta)

    def test_wrong_state_dimension(self):
        with pytest.raises(ValueError):
            f_eval(fitzhugh_nagumo, np.zeros(3), np.array([0.2, 0.2, 3.0]))


class TestCompiledRightHandSides:
    def test_fast_path_matches_reference(self):
        fastpath = pytest.importorskip("magi.fastpath")
        if not fastpath.NUMBA_AVAILABLE:
            pytest.skip("numba unavailable")
        rng = np.random.default_rng(16)
        for name in ("fn", "hes1-log", "protein-transduction"):
            system = get_system(name)
            rhs = fastpath._RHS[name]
            n = 7
            if name == "hes1-log":
                x = rng.uniform(-1.5, 1.5, (system.dim, n))
            elif system.positive:
                x = rng.uniform(0.2, 4.0, (system.dim, n))
            else:
                x = rng.uniform(-2.0, 2.0, (system.dim, n))
            theta = np.array(
                [
                    rng.uniform(lo + 0.05, hi if np.isfinite(hi) else 3.0)
                    for lo, hi in system.bounds
                ]
            )
            fx = np.empty_like(x)
            jx = np.empty((system.dim, system.dim, n))
            jt = np.empty((system.dim, system.n_params, n))
            rhs(x, theta, fx, jx, jt)
            t = np.zeros(n)
            assert np.allclose(fx, system.f(x, theta, t), atol=1e-12)
            assert np.allclose(jx, system.jac_x(x, theta, t), atol=1e-12)
            assert np.allclose(jt, system.jac_theta(x, theta, t), atol=1e-12)
