"""Variational and adjoint variational systems along a trajectory.

Linearizing a plant along a solution (x(t), u(t)) gives a linear
time-varying system with matrices (A_t, B_t, C_t, D_t); its adjoint is the
LTV system (-A_t^T, -C_t^T, B_t^T, D_t^T), characterized by the duality
identity

    d/dt p(t)^T dx(t) = y_a(t)^T du(t) - u_a(t)^T dy(t).

`duality_residual` integrates the pair (forward / backward from dx(0) = 0,
p(T) = 0) and measures how far the integrated identity is from zero.  Both
integrals ride along as RK4 quadrature states so the residual shrinks at
the integrator's order under grid refinement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr import ExprDomainError
from .model import GenericSystem, Trajectory, jacobians
from .solver import grid_signal

__all__ = [
    "LtvSystem",
    "variational_along",
    "adjoint_along",
    "adjoint_ltv",
    "duality_residual",
]


@dataclass(frozen=True)
class LtvSystem:
    """Linear time-varying system tabulated on a grid.

    Between grid points the matrices are interpolated piecewise-linearly in t;
    this is the system being integrated, so the adjoint-pair identities hold
    exactly for the interpolated matrices.
    """

    t: np.ndarray
    A: np.ndarray  # (K, n, n)
    B: np.ndarray  # (K, n, m)
    C: np.ndarray  # (K, m, n)
    D: np.ndarray  # (K, m, m)

    @property
    def n(self):
        return self.A.shape[1]

    @property
    def m(self):
        return self.D.shape[1]

    def matrices(self, tq):
        """Interpolated (A, B, C, D) at time tq."""
        t = self.t
        h = (t[-1] - t[0]) / (t.size - 1)
        k = int((tq - t[0]) / h)
        k = min(max(k, 0), t.size - 2)
        theta = (tq - t[k]) / h
        theta = min(max(theta, 0.0), 1.0)
        return tuple(
            M[k] + theta * (M[k + 1] - M[k]) for M in (self.A, self.B, self.C, self.D)
        )


def variational_along(sys: GenericSystem, traj: Trajectory) -> LtvSystem:
    """Tabulate the linearization of the plant along the trajectory."""
    K = traj.t.size
    n, m = sys.n, sys.m
    if sys.linear is not None:
        lin = sys.linear
        return LtvSystem(
            t=traj.t,
            A=np.broadcast_to(lin.A, (K, n, n)).copy(),
            B=np.broadcast_to(lin.B, (K, n, m)).copy(),
            C=np.broadcast_to(lin.C, (K, m, n)).copy(),
            D=np.broadcast_to(lin.D, (K, m, m)).copy(),
        )
    A = np.empty((K, n, n))
    B = np.empty((K, n, m))
    C = np.empty((K, m, n))
    D = np.empty((K, m, m))
    for k in range(K):
        try:
            A[k], B[k], C[k], D[k] = jacobians(sys, traj.x[k], traj.u[k])
        except ExprDomainError as e:
            raise ExprDomainError(e.subexpression, f"at t={traj.t[k]:.9g}: {e.reason}") from None
    return LtvSystem(t=traj.t, A=A, B=B, C=C, D=D)


def adjoint_ltv(ltv: LtvSystem) -> LtvSystem:
    """Pointwise adjoint (-A^T, -C^T, B^T, D^T) of a tabulated LTV system."""
    swap = (0, 2, 1)
    return LtvSystem(
        t=ltv.t,
        A=-ltv.A.transpose(swap),
        B=-ltv.C.transpose(swap),
        C=ltv.B.transpose(swap),
        D=ltv.D.transpose(swap),
    )


def adjoint_along(sys: GenericSystem, traj: Trajectory) -> LtvSystem:
    """Adjoint variational system along the trajectory.

    State p, input u_a, output y_a; integrated backward from p(T) = 0 when
    used as an optimal load, though the realization itself is directionless.
    """
    return adjoint_ltv(variational_along(sys, traj))


def _rk4_with_quadrature(f, y0, q0, tgrid, reverse=False):
    """RK4 for (ydot, qdot) = f(t, y); q is a scalar quadrature state.

    With reverse=True the grid is traversed from the end, integrating the
    same ODE in reversed time; returned arrays are indexed on the original grid.
    """
    K = len(tgrid)
    ys = np.empty((K, np.asarray(y0, dtype=float).size))
    qs = np.empty(K)
    order = range(K - 1, 0, -1) if reverse else range(K - 1)
    k0 = K - 1 if reverse else 0
    y = np.asarray(y0, dtype=float)
    q = float(q0)
    ys[k0] = y
    qs[k0] = q
    for k in order:
        knext = k - 1 if reverse else k + 1
        t0 = tgrid[k]
        h = tgrid[knext] - tgrid[k]  # negative when reversed
        k1y, k1q = f(t0, y)
        k2y, k2q = f(t0 + 0.5 * h, y + 0.5 * h * k1y)
        k3y, k3q = f(t0 + 0.5 * h, y + 0.5 * h * k2y)
        k4y, k4q = f(t0 + h, y + h * k3y)
        y = y + (h / 6.0) * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        q = q + (h / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
        ys[knext] = y
        qs[knext] = q
    return ys, qs


def duality_residual(sys: GenericSystem, traj: Trajectory, delta_u, u_a) -> float:
    """Integrated defect of the duality identity for the adjoint pair.

    delta_u and u_a are sampled on the trajectory grid.  The variational
    system runs forward from dx(0) = 0 with input delta_u, the adjoint
    backward from p(T) = 0 with input u_a; the two pairings are accumulated
    as RK4 quadrature states, so the residual vanishes at integrator order.
    """
    ltv = variational_along(sys, traj)
    adj = adjoint_ltv(ltv)
    tgrid = traj.t
    n = ltv.n
    du_fn = grid_signal(tgrid, np.asarray(delta_u, dtype=float))
    ua_fn = grid_signal(tgrid, np.asarray(u_a, dtype=float))

    def forward(t, dx):
        A, B, C, D = ltv.matrices(t)
        du = du_fn(t)
        dy = C @ dx + D @ du
        return A @ dx + B @ du, float(ua_fn(t) @ dy)

    dxs, q_uy = _rk4_with_quadrature(forward, np.zeros(n), 0.0, tgrid)

    def backward(t, p):
        Aa, Ba, Ca, Da = adj.matrices(t)
        ua = ua_fn(t)
        ya = Ca @ p + Da @ ua
        return Aa @ p + Ba @ ua, float(ya @ du_fn(t))

    ps, q_ydu = _rk4_with_quadrature(backward, np.zeros(n), 0.0, tgrid, reverse=True)
    # backward quadrature accumulates from T with negative steps: q(0) = -integral
    int_ya_du = -q_ydu[0]
    int_ua_dy = q_uy[-1]
    boundary = float(ps[-1] @ dxs[-1] - ps[0] @ dxs[0])
    return abs(int_ya_du - int_ua_dy - boundary)
