"""Shared test oracles: finite differences, random systems, linear ODE solutions."""

from __future__ import annotations

import numpy as np

from maxpower import expr as ex
from maxpower.model import (
    GenericSystem,
    GradientLinear,
    LinearSystem,
    PortHamiltonianLinear,
    to_generic,
)


def fd_gradient(f, z, h=1e-5):
    """Central-difference gradient of scalar f at point z."""
    z = np.asarray(z, dtype=float)
    g = np.zeros(z.size)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        g[i] = (f(zp) - f(zm)) / (2.0 * h)
    return g


def fd_hessian(f, z, h=1e-4):
    """Central-difference Hessian of scalar f at point z."""
    z = np.asarray(z, dtype=float)
    k = z.size
    H = np.zeros((k, k))
    f0 = f(z)
    for i in range(k):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        H[i, i] = (f(zp) - 2.0 * f0 + f(zm)) / (h * h)
        for j in range(i + 1, k):
            zpp, zpm, zmp, zmm = z.copy(), z.copy(), z.copy(), z.copy()
            zpp[[i, j]] += h
            zmm[[i, j]] -= h
            zpm[i] += h
            zpm[j] -= h
            zmp[i] -= h
            zmp[j] += h
            H[i, j] = H[j, i] = (f(zpp) - f(zpm) - f(zmp) + f(zmm)) / (4.0 * h * h)
    return H


def rel_err(got, want, floor=1.0):
    got = np.asarray(got, dtype=float)
    want = np.asarray(want, dtype=float)
    scale = max(floor, float(np.max(np.abs(want))) if want.size else 0.0)
    if got.size == 0:
        return 0.0
    return float(np.max(np.abs(got - want))) / scale


# ---------------------------------------------------------------------------
# Random expression / system generators (seeded, bounded on [0, 1] horizons).

_SAFE_TEMPLATES = (
    "{a}*sin({b}*x{i} + {c})",
    "{a}*cos({b}*u{k})",
    "{a}*tanh(x{i} + {b}*u{k})",
    "{a}*x{i}*u{k}",
    "{a}*x{i}^2",
    "{a}*u{k}^3",
    "{a}*exp({b}*tanh(x{i}))",
    "{a}*sqrt(1.5 + tanh(x{i}))",
    "{a}*log(2.0 + tanh(u{k}))",
    "{a}*x{i}/(2.0 + u{k}^2)",
)


def random_expr_source(rng, n, m, terms=3):
    parts = []
    for _ in range(terms):
        tpl = _SAFE_TEMPLATES[rng.integers(len(_SAFE_TEMPLATES))]
        parts.append(
            tpl.format(
                a=round(rng.uniform(-0.8, 0.8), 3),
                b=round(rng.uniform(-1.0, 1.0), 3),
                c=round(rng.uniform(-1.0, 1.0), 3),
                i=rng.integers(n) if n else 0,
                k=rng.integers(m) if m else 0,
            )
        )
    return " + ".join(parts)


def random_nonlinear_system(rng, n, m):
    f = tuple(ex.parse(random_expr_source(rng, n, m), n, m) for _ in range(n))
    h = tuple(ex.parse(random_expr_source(rng, n, m), n, m) for _ in range(m))
    return GenericSystem(n=n, m=m, f=f, h=h)


def random_linear_system(rng, n, m, stable=True):
    A = rng.normal(size=(n, n)) * 0.8
    if stable:
        A = A - (abs(np.linalg.eigvals(A).real).max() + 0.2) * np.eye(n)
    B = rng.normal(size=(n, m))
    C = rng.normal(size=(m, n))
    D = rng.normal(size=(m, m)) + np.eye(m)
    return LinearSystem(A=A, B=B, C=C, D=D)


def random_ph_linear(rng, n, m):
    S = rng.normal(size=(n, n))
    J = S - S.T
    L = rng.normal(size=(n, n)) * 0.4
    R = L @ L.T
    M = rng.normal(size=(n, n)) * 0.5
    Q = M @ M.T + 0.4 * np.eye(n)
    B = rng.normal(size=(n, m))
    N = rng.normal(size=(m, m)) * 0.4
    D = N @ N.T + 0.3 * np.eye(m)
    return PortHamiltonianLinear(J=J, R=R, Q=Q, B=B, D=D)


def random_gradient_linear(rng, n, m, definite=True):
    M = rng.normal(size=(n, n)) * 0.5
    G = M @ M.T + 0.5 * np.eye(n)
    if not definite:
        signs = np.diag(np.where(np.arange(n) % 2 == 0, 1.0, -1.0))
        G = signs @ G @ signs - 1.2 * np.eye(n)
        G = 0.5 * (G + G.T)
    P = rng.normal(size=(n, n))
    P = 0.5 * (P + P.T)
    C = rng.normal(size=(m, n))
    D = rng.normal(size=(m, m))
    D = 0.5 * (D + D.T)
    return GradientLinear(G=G, P_grad=P, C=C, D=D)


def smooth_signal(rng, tgrid, m, amplitude=0.5, max_freq=3.0):
    """Random smooth (sum-of-sinusoids) signal sampled on the grid, (K, m)."""
    T = tgrid[-1] - tgrid[0]
    out = np.zeros((tgrid.size, m))
    for c in range(m):
        for _ in range(rng.integers(1, 4)):
            a = rng.uniform(-amplitude, amplitude)
            w = rng.uniform(0.5, max_freq) * 2.0 * np.pi / max(T, 1e-9)
            phi = rng.uniform(0.0, 2.0 * np.pi)
            out[:, c] += a * np.sin(w * tgrid + phi)
    return out


def lti_response_constant_input(A, B, z0, v, t):
    """Exact solution of zdot = A z + B v (v constant) via an augmented exponential."""
    import scipy.linalg

    n = A.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = A
    aug[:n, n] = B @ v
    phi = scipy.linalg.expm(aug * t)
    return phi[:n, :n] @ z0 + phi[:n, n]


def simulate_generic(sysg, x0, tgrid, u_of_t):
    """Reference RK4 simulation used by tests (independent of solver internals)."""
    n = sysg.n
    x = np.asarray(x0, dtype=float)
    out = np.zeros((tgrid.size, n))
    out[0] = x
    from maxpower.model import rhs

    for k in range(tgrid.size - 1):
        t0, t1 = tgrid[k], tgrid[k + 1]
        h = t1 - t0
        k1 = rhs(sysg, x, u_of_t(t0))[0]
        k2 = rhs(sysg, x + 0.5 * h * k1, u_of_t(t0 + 0.5 * h))[0]
        k3 = rhs(sysg, x + 0.5 * h * k2, u_of_t(t0 + 0.5 * h))[0]
        k4 = rhs(sysg, x + h * k3, u_of_t(t1))[0]
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = x
    return out
