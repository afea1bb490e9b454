"""Hamiltonian input-output system built from a plant and its adjoint
variational system, and its inverse.

For a plant xdot = f(x, u), y = h(x, u) the composite generator is

    K(x, p, u) = p^T f(x, u) + u^T h(x, u)

with dynamics xdot = dK/dp, pdot = -dK/dx and output yplus = dK/du.
The output decomposes as yplus = y + y_a, where y_a is the adjoint
variational output driven by u itself.  Whenever the partial Hessian
d2K/du du^T has full rank, the input can be recovered from (x, p, yplus)
by a Newton solve; the inverse system is realized implicitly by evaluating
the forward vector field at that recovered input, which coincides with the
partial-Legendre-transform realization by the envelope property.
"""

from __future__ import annotations

import numpy as np

from .model import GenericSystem, LinearSystem

__all__ = [
    "HamiltonianSystem",
    "SingularHessianError",
    "NoConvergenceError",
    "NewtonStats",
    "sigma_plus_linear",
]

_COND_MAX = 1e12


class SingularHessianError(RuntimeError):
    """The partial input Hessian lost rank at an iterate."""

    def __init__(self, message, condition=None, t=None):
        if t is not None:
            message = f"t={t:.9g}: {message}"
        super().__init__(message)
        self.condition = condition
        self.t = t


class NoConvergenceError(RuntimeError):
    """Newton's method on the input-inversion equations exhausted its budget."""

    def __init__(self, message, residual=None, t=None):
        if t is not None:
            message = f"t={t:.9g}: {message}"
        super().__init__(message)
        self.residual = residual
        self.t = t


class NewtonStats:
    """Mutable iteration counter owned by an integration loop."""

    __slots__ = ("iterations",)

    def __init__(self):
        self.iterations = 0


class HamiltonianSystem:
    """Composite Hamiltonian IO system over a generic plant.

    States (x, p), input u, output yplus; all derivative evaluations are
    exact (dual numbers) with closed forms on the linear fast path.
    """

    def __init__(self, sys: GenericSystem):
        self.sys = sys
        self.n = sys.n
        self.m = sys.m
        self._u_active = tuple(("u", k) for k in range(sys.m))
        self._x_active = tuple(("x", i) for i in range(sys.n))
        self._feedthrough_inv = None  # cached (D + D^T)^-1 on the linear path

    # -- scalar generator ---------------------------------------------------

    def hplus(self, x, p, u):
        """p^T f(x, u) + u^T h(x, u)."""
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        u = np.asarray(u, dtype=float)
        lin = self.sys.linear
        if lin is not None:
            f = lin.A @ x + lin.B @ u
            h = lin.C @ x + lin.D @ u
        else:
            f = np.array([c.eval(x, u) for c in self.sys.f])
            h = np.array([c.eval(x, u) for c in self.sys.h])
        return float(p @ f + u @ h)

    # -- first-order pieces -------------------------------------------------

    def _u_derivs(self, x, u):
        """(f values, h values, fu, hu) with derivatives w.r.t. u only."""
        lin = self.sys.linear
        if lin is not None:
            return lin.A @ x + lin.B @ u, lin.C @ x + lin.D @ u, lin.B, lin.D
        n, m = self.n, self.m
        fvals = np.empty(n)
        hvals = np.empty(m)
        fu = np.empty((n, m))
        hu = np.empty((m, m))
        for i, comp in enumerate(self.sys.f):
            fvals[i], fu[i] = comp.eval_d1(x, u, self._u_active)
        for i, comp in enumerate(self.sys.h):
            hvals[i], hu[i] = comp.eval_d1(x, u, self._u_active)
        return fvals, hvals, fu, hu

    def _x_derivs(self, x, u):
        """(f values, fx, hx) with derivatives w.r.t. x only."""
        lin = self.sys.linear
        if lin is not None:
            return lin.A @ x + lin.B @ u, lin.A, lin.C
        n, m = self.n, self.m
        fvals = np.empty(n)
        fx = np.empty((n, n))
        hx = np.empty((m, n))
        for i, comp in enumerate(self.sys.f):
            fvals[i], fx[i] = comp.eval_d1(x, u, self._x_active)
        for i, comp in enumerate(self.sys.h):
            _, hx[i] = comp.eval_d1(x, u, self._x_active)
        return fvals, fx, hx

    def grad_u(self, x, p, u):
        """dK/du = fu^T p + h + hu^T u; equals the composite output yplus."""
        _, h, fu, hu = self._u_derivs(x, u)
        return fu.T @ p + h + hu.T @ u

    def rhs_plus(self, x, p, u):
        """(xdot, pdot, yplus) of the composite system."""
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        u = np.asarray(u, dtype=float)
        f, fx, hx = self._x_derivs(x, u)
        pdot = -(fx.T @ p) - hx.T @ u
        yplus = self.grad_u(x, p, u)
        return f, pdot, yplus

    # -- second-order piece -------------------------------------------------

    def _u_derivs2(self, x, p, u):
        """(grad, hessian) of the generator w.r.t. u at (x, p, u)."""
        lin = self.sys.linear
        if lin is not None:
            grad = lin.B.T @ p + (lin.C @ x + lin.D @ u) + lin.D.T @ u
            return grad, lin.D + lin.D.T
        n, m = self.n, self.m
        grad = np.zeros(m)
        hess = np.zeros((m, m))
        for i, comp in enumerate(self.sys.f):
            d = comp.eval_d2(x, u, self._u_active)
            grad += p[i] * d.grad
            hess += p[i] * d.hess
        hvals = np.empty(m)
        hu = np.empty((m, m))
        for j, comp in enumerate(self.sys.h):
            d = comp.eval_d2(x, u, self._u_active)
            hvals[j] = d.value
            hu[j] = d.grad
            hess += u[j] * d.hess
        grad += hvals + hu.T @ u
        hess += hu + hu.T
        return grad, hess

    def partial_hessian(self, x, p, u):
        """d2K/du du^T; symmetric by construction."""
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        u = np.asarray(u, dtype=float)
        _, hess = self._u_derivs2(x, p, u)
        return hess

    # -- inversion ----------------------------------------------------------

    def _linear_feedthrough_inv(self):
        if self._feedthrough_inv is None:
            lin = self.sys.linear
            R2 = lin.D + lin.D.T
            cond = np.linalg.cond(R2) if R2.size else 1.0
            if not np.isfinite(cond) or cond >= _COND_MAX:
                raise SingularHessianError(
                    f"feedthrough D + D^T is singular (cond={cond:.3e})", condition=cond
                )
            self._feedthrough_inv = np.linalg.inv(R2)
        return self._feedthrough_inv

    def invert_input(self, x, p, yplus_target, u_guess=None, *, tol=1e-10,
                     max_iter=50, stats=None, t=None):
        """Solve dK/du(x, p, u) = yplus_target for u.

        Newton's method with step-halving line search on the residual norm.
        The closed form u = (D + D^T)^-1 (yplus - C x - B^T p) is used on the
        linear fast path.  Local roots only: if several roots exist, the one
        reached from u_guess is returned (its residual certifies it).
        """
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        target = np.asarray(yplus_target, dtype=float)
        lin = self.sys.linear
        if lin is not None:
            try:
                Rinv = self._linear_feedthrough_inv()
            except SingularHessianError as e:
                raise SingularHessianError(str(e), condition=e.condition, t=t) from None
            return Rinv @ (target - lin.C @ x - lin.B.T @ p)

        u = np.zeros(self.m) if u_guess is None else np.asarray(u_guess, dtype=float).copy()
        grad, hess = self._u_derivs2(x, p, u)
        res = grad - target
        rnorm = float(np.max(np.abs(res))) if res.size else 0.0
        for _ in range(max_iter):
            if rnorm <= tol:
                return u
            if self.m == 1:
                if hess[0, 0] == 0.0:
                    raise SingularHessianError(
                        "partial input Hessian is zero", condition=np.inf, t=t
                    )
            else:
                cond = np.linalg.cond(hess)
                if not np.isfinite(cond) or cond >= _COND_MAX:
                    raise SingularHessianError(
                        f"partial input Hessian is singular (cond={cond:.3e})",
                        condition=cond, t=t,
                    )
            step = np.linalg.solve(hess, res)
            alpha = 1.0
            while True:
                u_new = u - alpha * step
                grad_new, hess_new = self._u_derivs2(x, p, u_new)
                res_new = grad_new - target
                rnorm_new = float(np.max(np.abs(res_new)))
                if stats is not None:
                    stats.iterations += 1
                if rnorm_new < rnorm or rnorm_new <= tol:
                    break
                alpha *= 0.5
                if alpha < 1e-16:
                    raise NoConvergenceError(
                        "line search stalled during input inversion",
                        residual=rnorm, t=t,
                    )
            u, grad, hess, res, rnorm = u_new, grad_new, hess_new, res_new, rnorm_new
        if rnorm <= tol:
            return u
        raise NoConvergenceError(
            f"input inversion did not reach tolerance {tol:g} in {max_iter} iterations",
            residual=rnorm, t=t,
        )

    def rhs_times(self, x, p, yplus, u_guess=None, *, tol=1e-10, stats=None, t=None):
        """(xdot, pdot, u) of the inverse system driven by yplus.

        Realized implicitly: recover u by inversion, then evaluate the
        forward vector field there (envelope property of the transform).
        """
        u = self.invert_input(x, p, yplus, u_guess, tol=tol, stats=stats, t=t)
        xdot, pdot, _ = self.rhs_plus(x, p, u)
        return xdot, pdot, u

    def htimes(self, x, p, yplus, u_guess=None, *, tol=1e-10):
        """Generator of the inverse system: K(x, p, u*) - u*^T yplus."""
        yplus = np.asarray(yplus, dtype=float)
        u = self.invert_input(x, p, yplus, u_guess, tol=tol)
        return self.hplus(x, p, u) - float(u @ yplus)


def sigma_plus_linear(lin: LinearSystem) -> LinearSystem:
    """Explicit linear realization of the composite system (states (x, p))."""
    n = lin.n
    A = np.block([
        [lin.A, np.zeros((n, n))],
        [np.zeros((n, n)), -lin.A.T],
    ])
    B = np.vstack([lin.B, -lin.C.T])
    C = np.hstack([lin.C, lin.B.T])
    D = lin.D + lin.D.T
    return LinearSystem(A=A, B=B, C=C, D=D)
