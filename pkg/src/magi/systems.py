"""ODE system definitions: interface, benchmark systems, log-transform.

A system is a pure container of callables.  The right-hand side ``f`` and
both Jacobians are vectorized over time: states have shape (D, n), times
shape (n,), and the Jacobians return (D, D, n) and (D, P, n) arrays
(output component, input component/parameter, time).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import DomainError

__all__ = [
    "OdeSystem",
    "ParamVector",
    "f_eval",
    "f_jacobians",
    "log_transform",
    "get_system",
    "register_system",
    "registered_systems",
    "fitzhugh_nagumo",
    "hes1",
    "protein_transduction",
]


@dataclass(frozen=True)
class OdeSystem:
    """An ODE model dx/dt = f(x, theta, t) with analytic Jacobians."""

    name: str
    components: tuple[str, ...]
    param_names: tuple[str, ...]
    bounds: tuple[tuple[float, float], ...]
    f: Callable
    jac_x: Callable
    jac_theta: Callable
    positive: bool = False
    # maps between the data scale and the working (state) scale, used by
    # log-transformed systems; identity when None
    obs_to_working: Callable | None = None
    working_to_obs: Callable | None = None

    @property
    def dim(self) -> int:
        return len(self.components)

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def check_theta(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,) or not np.all(np.isfinite(theta)):
            return False
        for value, (lo, hi) in zip(theta, self.bounds):
            if value < lo or value > hi:
                return False
        return True


def ParamVector(system: OdeSystem, values) -> np.ndarray:
    """Validated parameter vector within the system's declared support."""
    values = np.asarray(values, dtype=float)
    if not system.check_theta(values):
        raise ValueError(
            f"parameter vector {values} outside the support of {system.name}"
        )
    return values


def _as_matrix(x, dim):
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.shape[0] != dim:
        raise ValueError(f"state has {x.shape[0]} components, expected {dim}")
    return x, squeeze


def f_eval(system: OdeSystem, x, theta, t=0.0):
    """Evaluate f; accepts a single state (D,) or a batch (D, n)."""
    x, squeeze = _as_matrix(x, system.dim)
    out = system.f(x, np.asarray(theta, dtype=float), t)
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{system.name}: f is not finite at the given state")
    return out[:, 0] if squeeze else out


def f_jacobians(system: OdeSystem, x, theta, t=0.0):
    """Analytic Jacobians (df/dx, df/dtheta); single state or batch."""
    x, squeeze = _as_matrix(x, system.dim)
    theta = np.asarray(theta, dtype=float)
    jx = system.jac_x(x, theta, t)
    jt = system.jac_theta(x, theta, t)
    if not (np.all(np.isfinite(jx)) and np.all(np.isfinite(jt))):
        raise DomainError(f"{system.name}: Jacobian is not finite at the given state")
    if squeeze:
        return jx[:, :, 0], jt[:, :, 0]
    return jx, jt


# ---------------------------------------------------------------------------
# FitzHugh-Nagumo: membrane voltage V and recovery variable R
# ---------------------------------------------------------------------------

def _fn_f(x, theta, t):
    V, R = x
    a, b, c = theta
    out = np.empty_like(x)
    out[0] = c * (V - V * V * V / 3.0 + R)
    out[1] = -(V - a + b * R) / c
    return out


def _fn_jac_x(x, theta, t):
    V, R = x
    a, b, c = theta
    n = V.shape[0]
    jac = np.empty((2, 2, n))
    jac[0, 0] = c * (1.0 - V * V)
    jac[0, 1] = c
    jac[1, 0] = -1.0 / c
    jac[1, 1] = -b / c
    return jac


def _fn_jac_theta(x, theta, t):
    V, R = x
    a, b, c = theta
    n = V.shape[0]
    jac = np.zeros((2, 3, n))
    jac[0, 2] = V - V * V * V / 3.0 + R
    jac[1, 0] = 1.0 / c
    jac[1, 1] = -R / c
    jac[1, 2] = (V - a + b * R) / c**2
    return jac


fitzhugh_nagumo = OdeSystem(
    name="fn",
    components=("V", "R"),
    param_names=("a", "b", "c"),
    bounds=((0.0, np.inf),) * 3,
    f=_fn_f,
    jac_x=_fn_jac_x,
    jac_theta=_fn_jac_theta,
)


# ---------------------------------------------------------------------------
# Hes1 oscillator: protein P, mRNA M, interacting factor H
# ---------------------------------------------------------------------------

def _hes1_f(x, theta, t):
    P, M, H = x
    a, b, c, d, e, f, g = theta
    inhib = 1.0 / (1.0 + P * P)
    aPH = a * P * H
    out = np.empty_like(x)
    out[0] = -aPH + b * M - c * P
    out[1] = -d * M + e * inhib
    out[2] = -aPH + f * inhib - g * H
    return out


def _hes1_jac_x(x, theta, t):
    P, M, H = x
    a, b, c, d, e, f, g = theta
    n = P.shape[0]
    dinhib = -2.0 * P / (1.0 + P * P) ** 2
    jac = np.zeros((3, 3, n))
    jac[0, 0] = -a * H - c
    jac[0, 1] = b
    jac[0, 2] = -a * P
    jac[1, 0] = e * dinhib
    jac[1, 1] = -d
    jac[2, 0] = -a * H + f * dinhib
    jac[2, 2] = -a * P - g
    return jac


def _hes1_jac_theta(x, theta, t):
    P, M, H = x
    n = P.shape[0]
    inhib = 1.0 / (1.0 + P * P)
    jac = np.zeros((3, 7, n))
    jac[0, 0] = -P * H
    jac[0, 1] = M
    jac[0, 2] = -P
    jac[1, 3] = -M
    jac[1, 4] = inhib
    jac[2, 0] = -P * H
    jac[2, 5] = inhib
    jac[2, 6] = -H
    return jac


hes1 = OdeSystem(
    name="hes1",
    components=("P", "M", "H"),
    param_names=("a", "b", "c", "d", "e", "f", "g"),
    bounds=((0.0, np.inf),) * 7,
    f=_hes1_f,
    jac_x=_hes1_jac_x,
    jac_theta=_hes1_jac_theta,
    positive=True,
)


# ---------------------------------------------------------------------------
# Protein transduction: S, S_d, R, S_R, R_pp
# ---------------------------------------------------------------------------

def _pt_f(x, theta, t):
    S, Sd, R, SR, Rpp = x
    k1, k2, k3, k4, V, Km = theta
    denom = Km + Rpp
    if np.any(denom == 0.0):
        raise DomainError("protein transduction: Km + R_pp hit zero")
    mm = V * Rpp / denom
    sr = k2 * S * R
    k3SR = k3 * SR
    out = np.empty_like(x)
    out[0] = -k1 * S - sr + k3SR
    out[1] = k1 * S
    out[2] = -sr + k3SR + mm
    out[3] = sr - k3SR - k4 * SR
    out[4] = k4 * SR - mm
    return out


def _pt_jac_x(x, theta, t):
    S, Sd, R, SR, Rpp = x
    k1, k2, k3, k4, V, Km = theta
    n = S.shape[0]
    denom = Km + Rpp
    if np.any(denom == 0.0):
        raise DomainError("protein transduction: Km + R_pp hit zero")
    dmm = V * Km / denom**2
    jac = np.zeros((5, 5, n))
    jac[0, 0] = -k1 - k2 * R
    jac[0, 2] = -k2 * S
    jac[0, 3] = k3
    jac[1, 0] = k1
    jac[2, 0] = -k2 * R
    jac[2, 2] = -k2 * S
    jac[2, 3] = k3
    jac[2, 4] = dmm
    jac[3, 0] = k2 * R
    jac[3, 2] = k2 * S
    jac[3, 3] = -k3 - k4
    jac[4, 3] = k4
    jac[4, 4] = -dmm
    return jac


def _pt_jac_theta(x, theta, t):
    S, Sd, R, SR, Rpp = x
    k1, k2, k3, k4, V, Km = theta
    n = S.shape[0]
    denom = Km + Rpp
    if np.any(denom == 0.0):
        raise DomainError("protein transduction: Km + R_pp hit zero")
    jac = np.zeros((5, 6, n))
    jac[0, 0] = -S
    jac[0, 1] = -S * R
    jac[0, 2] = SR
    jac[1, 0] = S
    jac[2, 1] = -S * R
    jac[2, 2] = SR
    jac[2, 4] = Rpp / denom
    jac[2, 5] = -V * Rpp / denom**2
    jac[3, 1] = S * R
    jac[3, 2] = -SR
    jac[3, 3] = -SR
    jac[4, 3] = SR
    jac[4, 4] = -Rpp / denom
    jac[4, 5] = V * Rpp / denom**2
    return jac


protein_transduction = OdeSystem(
    name="protein-transduction",
    components=("S", "S_d", "R", "S_R", "R_pp"),
    param_names=("k1", "k2", "k3", "k4", "V", "Km"),
    bounds=((0.0, 4.0),) * 6,
    f=_pt_f,
    jac_x=_pt_jac_x,
    jac_theta=_pt_jac_theta,
    positive=True,
)


# ---------------------------------------------------------------------------
# Log-coordinate wrapper for strictly positive systems
# ---------------------------------------------------------------------------

def log_transform(system: OdeSystem) -> OdeSystem:
    """Rewrite a strictly positive system in log coordinates.

    With z = log x the transformed right-hand side is
    g_d(z) = f_d(exp z) / exp(z_d), and the Jacobians follow by the chain
    rule.  Observations on the original scale map through log/exp.
    """
    if not system.positive:
        raise ValueError(f"{system.name} is not flagged strictly positive")

    base_f, base_jx, base_jt = system.f, system.jac_x, system.jac_theta

    def g(z, theta, t):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            u = np.exp(z)
            return base_f(u, theta, t) / u

    def g_jac_x(z, theta, t):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            u = np.exp(z)
            fu = base_f(u, theta, t)
            jx = base_jx(u, theta, t)
            # d g_d / d z_j = J[d, j] u_j / u_d - delta_dj g_d
            out = jx * u[None, :, :] / u[:, None, :]
            gd = fu / u
            idx = np.arange(u.shape[0])
            out[idx, idx, :] -= gd
            return out

    def g_jac_theta(z, theta, t):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            u = np.exp(z)
            return base_jt(u, theta, t) / u[:, None, :]

    return replace(
        system,
        name=system.name + "-log",
        f=g,
        jac_x=g_jac_x,
        jac_theta=g_jac_theta,
        positive=False,
        obs_to_working=np.log,
        working_to_obs=np.exp,
    )


# ---------------------------------------------------------------------------
# Registry (CLI contract)
# ---------------------------------------------------------------------------

_REGISTRY: dict[str, OdeSystem] = {}


def register_system(system: OdeSystem, name: str | None = None):
    _REGISTRY[name or system.name] = system
    return system


def get_system(name: str) -> OdeSystem:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(
            f"unknown system '{name}'; available: {sorted(_REGISTRY)}"
        ) from None


def registered_systems() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


register_system(fitzhugh_nagumo)
register_system(hes1)
register_system(log_transform(hes1))
register_system(protein_transduction)
