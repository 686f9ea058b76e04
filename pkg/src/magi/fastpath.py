"""Compiled band-structured evaluation of the posterior and its gradient.

The precision and projection matrices are band-restricted during sampling,
so every matrix-vector product in the posterior costs O(n * b) rather than
O(n^2).  This module stores the bands as diagonals and evaluates the full
density and gradient in one compiled pass; the benchmark systems' right
hand sides are compiled alongside.  Results agree with the reference
implementation in :mod:`magi.posterior` up to floating-point summation
order.

If numba is unavailable, or a system has no compiled right-hand side, the
pipeline falls back to the pure-numpy target transparently.
"""

from __future__ import annotations

import math

import numpy as np

from .posterior import FlatTarget, LogPosterior

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:      # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap(args[0]) if args and callable(args[0]) else wrap


__all__ = ["FastTarget", "make_target", "fast_rhs_systems", "NUMBA_AVAILABLE"]


# ---------------------------------------------------------------------------
# compiled right-hand sides: fill f (D,n), df/dx (D,D,n), df/dtheta (D,P,n)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _fn_rhs(x, theta, fx, jx, jt):
    a, b, c = theta[0], theta[1], theta[2]
    for i in range(x.shape[1]):
        V = x[0, i]
        R = x[1, i]
        cubic = V - V * V * V / 3.0 + R
        fx[0, i] = c * cubic
        fx[1, i] = -(V - a + b * R) / c
        jx[0, 0, i] = c * (1.0 - V * V)
        jx[0, 1, i] = c
        jx[1, 0, i] = -1.0 / c
        jx[1, 1, i] = -b / c
        jt[0, 0, i] = 0.0
        jt[0, 1, i] = 0.0
        jt[0, 2, i] = cubic
        jt[1, 0, i] = 1.0 / c
        jt[1, 1, i] = -R / c
        jt[1, 2, i] = (V - a + b * R) / (c * c)


@njit(cache=True)
def _hes1_log_rhs(x, theta, fx, jx, jt):
    # log coordinates (p, m, h) of the Hes1 oscillator
    a, b, c, d, e, f, g = (
        theta[0], theta[1], theta[2], theta[3], theta[4], theta[5], theta[6],
    )
    for i in range(x.shape[1]):
        p = x[0, i]
        m = x[1, i]
        h = x[2, i]
        eH = math.exp(h)
        eP = math.exp(p)
        eMP = math.exp(m - p)
        enM = math.exp(-m)
        enH = math.exp(-h)
        A = 1.0 / (1.0 + math.exp(2.0 * p))
        dA = -2.0 * math.exp(2.0 * p) * A * A     # dA/dp
        fx[0, i] = -a * eH + b * eMP - c
        fx[1, i] = -d + e * enM * A
        fx[2, i] = -a * eP + f * enH * A - g
        jx[0, 0, i] = -b * eMP
        jx[0, 1, i] = b * eMP
        jx[0, 2, i] = -a * eH
        jx[1, 0, i] = e * enM * dA
        jx[1, 1, i] = -e * enM * A
        jx[1, 2, i] = 0.0
        jx[2, 0, i] = -a * eP + f * enH * dA
        jx[2, 1, i] = 0.0
        jx[2, 2, i] = -f * enH * A
        for k in range(7):
            jt[0, k, i] = 0.0
            jt[1, k, i] = 0.0
            jt[2, k, i] = 0.0
        jt[0, 0, i] = -eH
        jt[0, 1, i] = eMP
        jt[0, 2, i] = -1.0
        jt[1, 3, i] = -1.0
        jt[1, 4, i] = enM * A
        jt[2, 0, i] = -eP
        jt[2, 5, i] = enH * A
        jt[2, 6, i] = -1.0


@njit(cache=True)
def _pt_rhs(x, theta, fx, jx, jt):
    k1, k2, k3, k4, V, Km = (
        theta[0], theta[1], theta[2], theta[3], theta[4], theta[5],
    )
    for i in range(x.shape[1]):
        S = x[0, i]
        R = x[2, i]
        SR = x[3, i]
        Rpp = x[4, i]
        denom = Km + Rpp
        mm = V * Rpp / denom
        dmm = V * Km / (denom * denom)
        sr = S * R
        fx[0, i] = -k1 * S - k2 * sr + k3 * SR
        fx[1, i] = k1 * S
        fx[2, i] = -k2 * sr + k3 * SR + mm
        fx[3, i] = k2 * sr - k3 * SR - k4 * SR
        fx[4, i] = k4 * SR - mm
        for d in range(5):
            for j in range(5):
                jx[d, j, i] = 0.0
            for p in range(6):
                jt[d, p, i] = 0.0
        jx[0, 0, i] = -k1 - k2 * R
        jx[0, 2, i] = -k2 * S
        jx[0, 3, i] = k3
        jx[1, 0, i] = k1
        jx[2, 0, i] = -k2 * R
        jx[2, 2, i] = -k2 * S
        jx[2, 3, i] = k3
        jx[2, 4, i] = dmm
        jx[3, 0, i] = k2 * R
        jx[3, 2, i] = k2 * S
        jx[3, 3, i] = -k3 - k4
        jx[4, 3, i] = k4
        jx[4, 4, i] = -dmm
        jt[0, 0, i] = -S
        jt[0, 1, i] = -sr
        jt[0, 2, i] = SR
        jt[1, 0, i] = S
        jt[2, 1, i] = -sr
        jt[2, 2, i] = SR
        jt[2, 4, i] = Rpp / denom
        jt[2, 5, i] = -mm / denom
        jt[3, 1, i] = sr
        jt[3, 2, i] = -SR
        jt[3, 3, i] = -SR
        jt[4, 3, i] = SR
        jt[4, 4, i] = -Rpp / denom
        jt[4, 5, i] = mm / denom


_RHS = {
    "fn": _fn_rhs,
    "hes1-log": _hes1_log_rhs,
    "protein-transduction": _pt_rhs,
}


def fast_rhs_systems():
    """Names of systems with a compiled right-hand side."""
    return tuple(sorted(_RHS))


# ---------------------------------------------------------------------------
# compiled posterior kernel
# ---------------------------------------------------------------------------

@njit(cache=True)
def _band_matvec(diag, b, v, out):
    """out = A v where diag[b + s, j] stores A[j + s, j], |s| <= b.

    Runs diagonal-major so every inner loop is unit-stride.
    """
    n = v.shape[0]
    for i in range(n):
        out[i] = diag[b, i] * v[i]
    for s in range(1, b + 1):
        rp = diag[b + s]
        rm = diag[b - s]
        for j in range(n - s):
            out[j + s] += rp[j] * v[j]
        for j in range(s, n):
            out[j - s] += rm[j] * v[j]


@njit(cache=True)
def _band_matvec_t(diag, b, v, out):
    """out = A' v with the same diagonal storage as :func:`_band_matvec`."""
    n = v.shape[0]
    for j in range(n):
        out[j] = diag[b, j] * v[j]
    for s in range(1, b + 1):
        rp = diag[b + s]
        rm = diag[b - s]
        for j in range(n - s):
            out[j] += rp[j] * v[j + s]
        for j in range(s, n):
            out[j] += rm[j] * v[j - s]


@njit(cache=True)
def _posterior_value_grad(
    x, theta, sigma, mu, C_diag, m_diag, K_diag, band, const_sum, beta,
    obs_ptr, obs_idx, obs_y, obs_mask,
    fx, jx, jt, xc, r, Cx, Kr, tmp,
    grad_x, grad_theta, grad_sigma, rhs,
):
    """Tempered log-posterior and gradient; see :class:`magi.posterior.LogPosterior`.

    grad_x, grad_theta, grad_sigma are outputs; the return value is the
    density (non-finite when the state leaves the domain).
    """
    D, n = x.shape
    P = theta.shape[0]
    rhs(x, theta, fx, jx, jt)

    total = const_sum
    for d in range(D):
        for i in range(n):
            xc[d, i] = x[d, i] - mu[d]
        _band_matvec(m_diag[d], band, xc[d], tmp)
        for i in range(n):
            r[d, i] = fx[d, i] - tmp[i]
        _band_matvec(C_diag[d], band, xc[d], Cx[d])
        _band_matvec(K_diag[d], band, r[d], Kr[d])
        for i in range(n):
            total += xc[d, i] * Cx[d, i] + r[d, i] * Kr[d, i]

    inv_beta = 1.0 / beta
    for d in range(D):
        _band_matvec_t(m_diag[d], band, Kr[d], tmp)
        for i in range(n):
            acc = Cx[d, i] - tmp[i]
            for k in range(D):
                acc += jx[k, d, i] * Kr[k, i]
            grad_x[d, i] = -acc * inv_beta
    for p in range(P):
        acc = 0.0
        for k in range(D):
            for i in range(n):
                acc += jt[k, p, i] * Kr[k, i]
        grad_theta[p] = -acc * inv_beta

    obs = 0.0
    for d in range(D):
        grad_sigma[d] = 0.0
        if not obs_mask[d]:
            continue
        s = sigma[d]
        s2 = s * s
        sq = 0.0
        count = obs_ptr[d + 1] - obs_ptr[d]
        for k in range(obs_ptr[d], obs_ptr[d + 1]):
            i = obs_idx[k]
            e = x[d, i] - obs_y[k]
            sq += e * e
            grad_x[d, i] -= e / s2
        obs += count * math.log(2.0 * math.pi * s2) + sq / s2
        grad_sigma[d] = -count / s + sq / (s2 * s)

    return -0.5 * (obs + total * inv_beta)


@njit(cache=True)
def _flat_eval(
    q, D, n, P, free_idx, sigma_buf, mu, C_diag, m_diag, K_diag, band,
    const_sum, beta, obs_ptr, obs_idx, obs_y, obs_mask,
    fx, jx, jt, xc, r, Cx, Kr, tmp, x_buf, theta_buf,
    grad_x, grad_theta, grad_sigma, grad_q, rhs,
):
    """Value and flat gradient at a packed position; fills ``grad_q``."""
    Dn = D * n
    for d in range(D):
        for i in range(n):
            x_buf[d, i] = q[d * n + i]
    for j in range(P):
        theta_buf[j] = q[Dn + j]
    nS = free_idx.shape[0]
    for k in range(nS):
        sigma_buf[free_idx[k]] = math.exp(q[Dn + P + k])
    value = _posterior_value_grad(
        x_buf, theta_buf, sigma_buf, mu, C_diag, m_diag, K_diag, band,
        const_sum, beta, obs_ptr, obs_idx, obs_y, obs_mask,
        fx, jx, jt, xc, r, Cx, Kr, tmp, grad_x, grad_theta, grad_sigma, rhs,
    )
    for d in range(D):
        for i in range(n):
            grad_q[d * n + i] = grad_x[d, i]
    for j in range(P):
        grad_q[Dn + j] = grad_theta[j]
    for k in range(nS):
        s = sigma_buf[free_idx[k]]
        grad_q[Dn + P + k] = grad_sigma[free_idx[k]] * s + 1.0
        value += math.log(s)
    return value


@njit(cache=True)
def _leapfrog_run(
    q, p, step, n_steps, theta_lo, theta_hi,
    D, n, P, free_idx, sigma_buf, mu, C_diag, m_diag, K_diag, band,
    const_sum, beta, obs_ptr, obs_idx, obs_y, obs_mask,
    fx, jx, jt, xc, r, Cx, Kr, tmp, x_buf, theta_buf,
    grad_x, grad_theta, grad_sigma, grad_q, rhs,
):
    """Full leapfrog trajectory in one compiled pass; mutates q and p.

    Mirrors :func:`magi.hmc.leapfrog`: half momentum step, alternating
    position/momentum steps with reflection at the parameter bounds, half
    momentum step.  Returns (ok, value at the final position); ok is False
    when the trajectory diverged (non-finite state or gradient, or a
    position that could not be reflected into bounds).
    """
    size = q.shape[0]
    Dn = D * n
    value = _flat_eval(
        q, D, n, P, free_idx, sigma_buf, mu, C_diag, m_diag, K_diag, band,
        const_sum, beta, obs_ptr, obs_idx, obs_y, obs_mask,
        fx, jx, jt, xc, r, Cx, Kr, tmp, x_buf, theta_buf,
        grad_x, grad_theta, grad_sigma, grad_q, rhs,
    )
    for i in range(size):
        if not np.isfinite(grad_q[i]):
            return False, 0.0
    for i in range(size):
        p[i] += 0.5 * step * grad_q[i]
    for it in range(n_steps):
        for i in range(size):
            q[i] += step * p[i]
        for j in range(P):
            idx = Dn + j
            lo = theta_lo[j]
            hi = theta_hi[j]
            bounced = 0
            while q[idx] < lo or q[idx] > hi:
                if q[idx] < lo:
                    q[idx] = 2.0 * lo - q[idx]
                else:
                    q[idx] = 2.0 * hi - q[idx]
                p[idx] = -p[idx]
                bounced += 1
                if bounced >= 100:
                    return False, 0.0
        for i in range(size):
            if not np.isfinite(q[i]):
                return False, 0.0
        value = _flat_eval(
            q, D, n, P, free_idx, sigma_buf, mu, C_diag, m_diag, K_diag, band,
            const_sum, beta, obs_ptr, obs_idx, obs_y, obs_mask,
            fx, jx, jt, xc, r, Cx, Kr, tmp, x_buf, theta_buf,
            grad_x, grad_theta, grad_sigma, grad_q, rhs,
        )
        for i in range(size):
            if not np.isfinite(grad_q[i]):
                return False, 0.0
        factor = step if it < n_steps - 1 else 0.5 * step
        for i in range(size):
            p[i] += factor * grad_q[i]
    return True, value


def _band_diagonals(stack, band):
    """(D, n, n) band-masked dense stack -> (D, 2 band + 1, n) diagonals."""
    D, n, _ = stack.shape
    out = np.zeros((D, 2 * band + 1, n))
    for d in range(D):
        for k in range(-band, band + 1):
            idx = np.arange(max(0, k), min(n, n + k))
            out[d, band + k, idx - k] = stack[d][idx, idx - k]
    return out


class FastTarget(FlatTarget):
    """Drop-in replacement for :class:`FlatTarget` backed by the compiled
    band kernel.  Same position layout, bounds, and semantics."""

    def __init__(self, posterior: LogPosterior, sigma_fixed: np.ndarray):
        super().__init__(posterior, sigma_fixed)
        name = posterior.system.name
        if name not in _RHS:
            raise KeyError(f"no compiled right-hand side for system '{name}'")
        self._rhs = _RHS[name]
        D, n = self.D, self.n
        band = posterior.band_size if posterior.band_size is not None else n - 1
        self._band = int(min(band, n - 1))
        self._C_diag = _band_diagonals(posterior.C_inv, self._band)
        self._m_diag = _band_diagonals(posterior.m, self._band)
        self._K_diag = _band_diagonals(posterior.K_inv, self._band)
        self._mu_flat = posterior.mu[:, 0].copy()
        ptr = np.zeros(D + 1, dtype=np.int64)
        idx_parts, y_parts = [], []
        for d in range(D):
            ptr[d + 1] = ptr[d] + posterior.obs_idx[d].size
            idx_parts.append(np.asarray(posterior.obs_idx[d], dtype=np.int64))
            y_parts.append(posterior.obs_values[d])
        self._obs_ptr = ptr
        self._obs_idx = np.concatenate(idx_parts) if D else np.zeros(0, np.int64)
        self._obs_y = np.concatenate(y_parts) if D else np.zeros(0)
        self._obs_mask = posterior.observed.astype(np.bool_)
        self._scratch = tuple(np.empty((D, n)) for _ in range(5)) + (
            np.empty((D, D, n)),
            np.empty((D, len(posterior.theta_lower), n)),
            np.empty(n),
        )
        self._grad_sigma = np.empty(D)
        self._free_idx = np.flatnonzero(self.free_sigma).astype(np.int64)
        self._sigma_buf = np.where(
            np.isfinite(self.sigma_fixed), self.sigma_fixed, 1.0
        ).astype(float)
        self._x_buf = np.empty((D, n))
        self._theta_buf = np.empty(len(posterior.theta_lower))
        self._grad_x_buf = np.empty((D, n))
        self._grad_theta_buf = np.empty(len(posterior.theta_lower))
        self._grad_q_buf = np.empty(self.size)

    def _kernel(self, state, grad_x, grad_theta, grad_sigma):
        post = self.posterior
        fx, xc, r_buf, Cx, Kr, jx, jt, tmp = self._scratch
        return _posterior_value_grad(
            state.x, state.theta, state.sigma, self._mu_flat,
            self._C_diag, self._m_diag, self._K_diag, self._band,
            post.const_sum, post.beta,
            self._obs_ptr, self._obs_idx, self._obs_y, self._obs_mask,
            fx, jx, jt, xc, r_buf, Cx, Kr, tmp,
            grad_x, grad_theta, grad_sigma, self._rhs,
        )

    def run_leapfrog(self, q, p, step, n_steps):
        """Compiled leapfrog trajectory; returns (q', p', value at q', ok)."""
        post = self.posterior
        fx, xc, r_buf, Cx, Kr, jx, jt, tmp = self._scratch
        q1 = np.array(q, dtype=float)
        p1 = np.array(p, dtype=float)
        ok, value = _leapfrog_run(
            q1, p1, float(step), int(n_steps),
            post.theta_lower, post.theta_upper,
            self.D, self.n, self.P, self._free_idx, self._sigma_buf,
            self._mu_flat, self._C_diag, self._m_diag, self._K_diag, self._band,
            post.const_sum, post.beta,
            self._obs_ptr, self._obs_idx, self._obs_y, self._obs_mask,
            fx, jx, jt, xc, r_buf, Cx, Kr, tmp,
            self._x_buf, self._theta_buf,
            self._grad_x_buf, self._grad_theta_buf, self._grad_sigma,
            self._grad_q_buf, self._rhs,
        )
        return q1, p1, value, ok

    def log_prob(self, q: np.ndarray) -> float:
        state = self.unpack(q)
        if not self.posterior.theta_in_support(state.theta):
            return -np.inf
        D, n, P = self.D, self.n, self.P
        grad_x = np.empty((D, n))
        grad_theta = np.empty(P)
        value = self._kernel(state, grad_x, grad_theta, self._grad_sigma)
        if not np.isfinite(value):
            return -np.inf
        if self.n_sigma:
            value += float(np.sum(q[D * n + P :]))
        return value

    def log_prob_and_grad(self, q: np.ndarray):
        state = self.unpack(q)
        D, n, P = self.D, self.n, self.P
        Dn = D * n
        grad = np.empty(self.size)
        if not self.posterior.theta_in_support(state.theta):
            grad.fill(np.nan)
            return -np.inf, grad
        grad_x = grad[:Dn].reshape(D, n)
        grad_theta = grad[Dn : Dn + P]
        value = self._kernel(state, grad_x, grad_theta, self._grad_sigma)
        if self.n_sigma:
            sig = state.sigma[self.free_sigma]
            grad[Dn + P :] = self._grad_sigma[self.free_sigma] * sig + 1.0
            value += float(np.sum(np.log(sig)))
        return value, grad


def make_target(posterior: LogPosterior, sigma_fixed: np.ndarray) -> FlatTarget:
    """Compiled target when possible, reference numpy target otherwise."""
    if NUMBA_AVAILABLE and posterior.system.name in _RHS:
        return FastTarget(posterior, sigma_fixed)
    return FlatTarget(posterior, sigma_fixed)
