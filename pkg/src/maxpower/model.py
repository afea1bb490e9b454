"""State-space system classes and lowering to the generic (f, h) form.

The generic system is

    xdot = f(x, u),   y = h(x, u),   x in R^n, u, y in R^m,

with f and h given as expression trees so Jacobians and Hessians are exact.
Structured classes (linear, port-Hamiltonian, gradient, static nonlinearity)
lower to this form via `to_generic`; linear-equivalent classes additionally
carry their (A, B, C, D) realization so downstream code can take closed-form
fast paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import expr as ex

__all__ = [
    "SystemStructureError",
    "GenericSystem",
    "LinearSystem",
    "PortHamiltonianLinear",
    "GradientLinear",
    "PortHamiltonianNonlinear",
    "GradientNonlinear",
    "StaticNonlinearity",
    "StructuredSystem",
    "Trajectory",
    "to_generic",
    "rhs",
    "jacobians",
]

_SYM_TOL = 1e-12
_PSD_FLOOR = -1e-10
_COND_MAX = 1e12


class SystemStructureError(ValueError):
    """A structured-system invariant (symmetry, definiteness, rank) fails."""


def _as_matrix(M, rows, cols, name):
    M = np.asarray(M, dtype=float)
    if M.shape != (rows, cols):
        raise SystemStructureError(f"{name} must be {rows}x{cols}, got {M.shape}")
    return M


def _require_symmetric(M, name):
    if M.size and np.max(np.abs(M - M.T)) > _SYM_TOL:
        raise SystemStructureError(f"{name} must be symmetric (tolerance {_SYM_TOL})")


def _require_skew(M, name):
    if M.size and np.max(np.abs(M + M.T)) > _SYM_TOL:
        raise SystemStructureError(f"{name} must be skew-symmetric (tolerance {_SYM_TOL})")


def _require_psd(M, name):
    if M.size and np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) < _PSD_FLOOR:
        raise SystemStructureError(f"{name} must be positive semidefinite")


def _require_invertible(M, name):
    if M.size == 0:
        return
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond >= _COND_MAX:
        raise SystemStructureError(f"{name} is numerically singular (cond={cond:.3e})")


# ---------------------------------------------------------------------------
# Structured classes.

@dataclass(frozen=True)
class LinearSystem:
    """xdot = A x + B u,  y = C x + D u."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float)
        m = B.shape[1] if B.ndim == 2 else 0
        object.__setattr__(self, "A", _as_matrix(A, n, n, "A"))
        object.__setattr__(self, "B", _as_matrix(B, n, m, "B"))
        object.__setattr__(self, "C", _as_matrix(self.C, m, n, "C"))
        object.__setattr__(self, "D", _as_matrix(self.D, m, m, "D"))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.D.shape[0]


@dataclass(frozen=True)
class PortHamiltonianLinear:
    """xdot = (J - R) Q x + B u,  y = B^T Q x + D u with quadratic energy."""

    J: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    B: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float)
        n = J.shape[0]
        B = np.asarray(self.B, dtype=float)
        m = B.shape[1] if B.ndim == 2 else 0
        object.__setattr__(self, "J", _as_matrix(J, n, n, "J"))
        object.__setattr__(self, "R", _as_matrix(self.R, n, n, "R"))
        object.__setattr__(self, "Q", _as_matrix(self.Q, n, n, "Q"))
        object.__setattr__(self, "B", _as_matrix(B, n, m, "B"))
        object.__setattr__(self, "D", _as_matrix(self.D, m, m, "D"))
        _require_skew(self.J, "J")
        _require_symmetric(self.R, "R")
        _require_psd(self.R, "R")
        _require_symmetric(self.Q, "Q")
        _require_symmetric(self.D, "D")
        _require_psd(self.D, "D")

    @property
    def n(self):
        return self.J.shape[0]

    @property
    def m(self):
        return self.D.shape[0]


@dataclass(frozen=True)
class GradientLinear:
    """G xdot = -P x + C^T u,  y = C x + D u with symmetric invertible metric G."""

    G: np.ndarray
    P_grad: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        G = np.asarray(self.G, dtype=float)
        n = G.shape[0]
        C = np.asarray(self.C, dtype=float)
        m = C.shape[0] if C.ndim == 2 else 0
        object.__setattr__(self, "G", _as_matrix(G, n, n, "G"))
        object.__setattr__(self, "P_grad", _as_matrix(self.P_grad, n, n, "P_grad"))
        object.__setattr__(self, "C", _as_matrix(C, m, n, "C"))
        object.__setattr__(self, "D", _as_matrix(self.D, m, m, "D"))
        _require_symmetric(self.G, "G")
        _require_invertible(self.G, "G")
        _require_symmetric(self.P_grad, "P_grad")
        _require_symmetric(self.D, "D")

    @property
    def n(self):
        return self.G.shape[0]

    @property
    def m(self):
        return self.C.shape[0]


@dataclass(frozen=True)
class PortHamiltonianNonlinear:
    """xdot = (J - R) dH/dx + B u,  y = B^T dH/dx + D u, constant structure matrices."""

    J: np.ndarray
    R: np.ndarray
    B: np.ndarray
    D: np.ndarray
    H: ex.Expr  # energy, state-dependent only

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float)
        n = J.shape[0]
        B = np.asarray(self.B, dtype=float)
        m = B.shape[1] if B.ndim == 2 else 0
        object.__setattr__(self, "J", _as_matrix(J, n, n, "J"))
        object.__setattr__(self, "R", _as_matrix(self.R, n, n, "R"))
        object.__setattr__(self, "B", _as_matrix(B, n, m, "B"))
        object.__setattr__(self, "D", _as_matrix(self.D, m, m, "D"))
        _require_skew(self.J, "J")
        _require_symmetric(self.R, "R")
        _require_psd(self.R, "R")
        _require_symmetric(self.D, "D")
        _require_psd(self.D, "D")
        if any(kind == "u" for kind, _ in ex.free_variables(self.H.root)):
            raise SystemStructureError("energy H must not depend on inputs")
        object.__setattr__(self, "H", ex.rebind(self.H, n, m))

    @property
    def n(self):
        return self.J.shape[0]

    @property
    def m(self):
        return self.D.shape[0]

    def energy_gradient(self):
        return tuple(ex.differentiate(self.H, ("x", j)) for j in range(self.n))


@dataclass(frozen=True)
class GradientNonlinear:
    """G xdot = -dV/dx(x, u),  y = -dV/du(x, u), constant flat metric G."""

    G: np.ndarray
    V: ex.Expr  # potential over (x, u)

    def __post_init__(self):
        G = np.asarray(self.G, dtype=float)
        n = G.shape[0]
        object.__setattr__(self, "G", _as_matrix(G, n, n, "G"))
        _require_symmetric(self.G, "G")
        _require_invertible(self.G, "G")
        if self.V.n != n:
            raise SystemStructureError(
                f"potential V is bound to n={self.V.n}, metric G has n={n}"
            )

    @property
    def n(self):
        return self.G.shape[0]

    @property
    def m(self):
        return self.V.m


@dataclass(frozen=True)
class StaticNonlinearity:
    """Memoryless y = h(u); n = 0."""

    m: int
    h: tuple

    def __post_init__(self):
        h = tuple(self.h)
        if len(h) != self.m:
            raise SystemStructureError(f"h must have {self.m} components, got {len(h)}")
        for comp in h:
            if any(kind == "x" for kind, _ in ex.free_variables(comp.root)):
                raise SystemStructureError("static nonlinearity must not depend on state")
        object.__setattr__(self, "h", tuple(ex.rebind(comp, 0, self.m) for comp in h))

    @property
    def n(self):
        return 0


StructuredSystem = Union[
    LinearSystem,
    PortHamiltonianLinear,
    GradientLinear,
    PortHamiltonianNonlinear,
    GradientNonlinear,
    StaticNonlinearity,
]


# ---------------------------------------------------------------------------
# Generic form.

@dataclass(frozen=True)
class GenericSystem:
    """Square nonlinear system xdot = f(x, u), y = h(x, u).

    `linear` carries the (A, B, C, D) realization when the system was lowered
    from a linear-equivalent structured class; it enables closed-form fast
    paths and is never required for correctness.
    """

    n: int
    m: int
    f: tuple
    h: tuple
    linear: Optional[LinearSystem] = None

    def __post_init__(self):
        f = tuple(self.f)
        h = tuple(self.h)
        if len(f) != self.n:
            raise SystemStructureError(f"f must have {self.n} components, got {len(f)}")
        if len(h) != self.m:
            raise SystemStructureError(f"h must have {self.m} components, got {len(h)}")
        for comp in f + h:
            if comp.n != self.n or comp.m != self.m:
                raise SystemStructureError(
                    f"component bound to (n={comp.n}, m={comp.m}), "
                    f"system declares (n={self.n}, m={self.m})"
                )
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "h", h)

    def without_fast_path(self):
        return GenericSystem(self.n, self.m, self.f, self.h, linear=None)


def _lincomb(pairs, n, m):
    """Expression node for sum of coeff*node terms, skipping zero coefficients."""
    node = ex.Num(0.0)
    for coeff, term in pairs:
        if coeff == 0.0:
            continue
        node = ex.mk_add(node, ex.mk_mul(ex.Num(float(coeff)), term))
    return node


def _matrix_rows_exprs(M, var_kind, n, m):
    """Rows of M @ v as expression nodes, v the stacked x or u variables."""
    rows = []
    for i in range(M.shape[0]):
        pairs = [(M[i, j], ex.Var(var_kind, j)) for j in range(M.shape[1])]
        rows.append(_lincomb(pairs, n, m))
    return rows


def _linear_to_generic(lin):
    n, m = lin.n, lin.m
    fx = _matrix_rows_exprs(lin.A, "x", n, m)
    fu = _matrix_rows_exprs(lin.B, "u", n, m)
    hx = _matrix_rows_exprs(lin.C, "x", n, m)
    hu = _matrix_rows_exprs(lin.D, "u", n, m)
    f = tuple(ex.Expr(ex.mk_add(a, b), n, m) for a, b in zip(fx, fu))
    h = tuple(ex.Expr(ex.mk_add(a, b), n, m) for a, b in zip(hx, hu))
    return GenericSystem(n=n, m=m, f=f, h=h, linear=lin)


def to_generic(s):
    """Lower any structured system to the generic (f, h) form."""
    if isinstance(s, GenericSystem):
        return s
    if isinstance(s, LinearSystem):
        return _linear_to_generic(s)
    if isinstance(s, PortHamiltonianLinear):
        A = (s.J - s.R) @ s.Q
        C = s.B.T @ s.Q
        return _linear_to_generic(LinearSystem(A=A, B=s.B, C=C, D=s.D))
    if isinstance(s, GradientLinear):
        Ginv = np.linalg.inv(s.G)
        return _linear_to_generic(
            LinearSystem(A=-Ginv @ s.P_grad, B=Ginv @ s.C.T, C=s.C, D=s.D)
        )
    if isinstance(s, PortHamiltonianNonlinear):
        n, m = s.n, s.m
        dH = [comp.root for comp in s.energy_gradient()]
        JR = s.J - s.R
        f = []
        for i in range(n):
            node = _lincomb([(JR[i, j], dH[j]) for j in range(n)], n, m)
            node = ex.mk_add(
                node, _lincomb([(s.B[i, k], ex.Var("u", k)) for k in range(m)], n, m)
            )
            f.append(ex.Expr(node, n, m))
        h = []
        for i in range(m):
            node = _lincomb([(s.B[j, i], dH[j]) for j in range(n)], n, m)
            node = ex.mk_add(
                node, _lincomb([(s.D[i, k], ex.Var("u", k)) for k in range(m)], n, m)
            )
            h.append(ex.Expr(node, n, m))
        return GenericSystem(n=n, m=m, f=tuple(f), h=tuple(h))
    if isinstance(s, GradientNonlinear):
        n, m = s.n, s.m
        Ginv = np.linalg.inv(s.G)
        dVdx = [ex.differentiate(s.V, ("x", j)).root for j in range(n)]
        dVdu = [ex.differentiate(s.V, ("u", k)).root for k in range(m)]
        f = tuple(
            ex.Expr(_lincomb([(-Ginv[i, j], dVdx[j]) for j in range(n)], n, m), n, m)
            for i in range(n)
        )
        h = tuple(ex.Expr(ex.mk_neg(node), n, m) for node in dVdu)
        return GenericSystem(n=n, m=m, f=f, h=h)
    if isinstance(s, StaticNonlinearity):
        return GenericSystem(n=0, m=s.m, f=(), h=s.h)
    raise TypeError(f"unsupported system type {type(s).__name__}")


# ---------------------------------------------------------------------------
# Evaluation.

def rhs(sys, x, u):
    """(xdot, y) at the point (x, u)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError(f"state has shape {x.shape}, expected ({sys.n},)")
    if u.shape != (sys.m,):
        raise ValueError(f"input has shape {u.shape}, expected ({sys.m},)")
    lin = sys.linear
    if lin is not None:
        return lin.A @ x + lin.B @ u, lin.C @ x + lin.D @ u
    xdot = np.array([comp.eval(x, u) for comp in sys.f])
    y = np.array([comp.eval(x, u) for comp in sys.h])
    return xdot, y


_ACTIVE_CACHE = {}


def _all_active(n, m):
    key = (n, m)
    cached = _ACTIVE_CACHE.get(key)
    if cached is None:
        cached = tuple(("x", i) for i in range(n)) + tuple(("u", k) for k in range(m))
        _ACTIVE_CACHE[key] = cached
    return cached


def jacobians(sys, x, u):
    """(fx, fu, hx, hu) with fx[i, j] = d f_i / d x_j, etc."""
    lin = sys.linear
    if lin is not None:
        return lin.A, lin.B, lin.C, lin.D
    n, m = sys.n, sys.m
    active = _all_active(n, m)
    fx = np.empty((n, n))
    fu = np.empty((n, m))
    hx = np.empty((m, n))
    hu = np.empty((m, m))
    for i, comp in enumerate(sys.f):
        _, g = comp.eval_d1(x, u, active)
        fx[i] = g[:n]
        fu[i] = g[n:]
    for i, comp in enumerate(sys.h):
        _, g = comp.eval_d1(x, u, active)
        hx[i] = g[:n]
        hu[i] = g[n:]
    return fx, fu, hx, hu


# ---------------------------------------------------------------------------
# Sampled trajectories.

@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled path carrying whichever columns the producer filled."""

    t: np.ndarray              # (K,)
    x: np.ndarray              # (K, n)
    u: np.ndarray              # (K, m)
    y: np.ndarray              # (K, m)
    p: Optional[np.ndarray] = None      # (K, n) co-state
    yplus: Optional[np.ndarray] = None  # (K, m) composite output

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid must be 1-D with at least two points")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "t", t)

    @property
    def step(self):
        return (self.t[-1] - self.t[0]) / (self.t.size - 1)

    @property
    def n(self):
        return self.x.shape[1]

    @property
    def m(self):
        return self.u.shape[1]
