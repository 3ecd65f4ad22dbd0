"""Dense complex-matrix kernels, structured linear solvers and ODE steppers.

Matrices are vectorised row-major throughout, so ``vec(A @ X @ B) ==
np.kron(A, B.T) @ vec(X)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.linalg.lapack import ztrsyl
from scipy.sparse.linalg import LinearOperator, gmres

from .errors import IllConditioned, NonFiniteDerivative, SingularSpectrum

__all__ = [
    "LinearMap",
    "SylvesterSolver",
    "solve_sylvester",
    "solve_singular_linear",
    "solve_linear",
    "ode_step_rk4",
    "dag",
    "comm",
    "inner",
]


def dag(x):
    return np.conj(np.swapaxes(x, -1, -2))


def comm(a, b):
    return a @ b - b @ a


def inner(a, b):
    """Frobenius inner product <a, b> = tr(a^dagger b)."""
    return np.vdot(a, b)


@dataclass(frozen=True)
class LinearMap:
    """Linear action on complex arrays of a fixed shape.

    Parameters
    ----------
    action : callable
        ``X -> m(X)`` for an array of shape ``shape`` (``(D, D)`` for the
        transfer maps, ``(2, D, D)`` for the Bogoliubov pair maps).
    shape : tuple of int
        Input and output array shape.
    adjoint_action : callable, optional
        Action of the Frobenius adjoint.
    dense : callable, optional
        Returns the explicit ``(n, n)`` matrix of the action in row-major
        vectorisation. Small problems use it for direct factorisation.
    """

    action: Callable[[np.ndarray], np.ndarray]
    shape: tuple
    adjoint_action: Optional[Callable[[np.ndarray], np.ndarray]] = None
    dense: Optional[Callable[[], np.ndarray]] = None

    def __call__(self, x):
        return self.action(x)

    @property
    def dim(self):
        return self.shape[-1]

    @property
    def size(self):
        return int(np.prod(self.shape))

    def adjoint(self) -> "LinearMap":
        if self.adjoint_action is None:
            raise NotImplementedError("adjoint action not provided")
        dense = None
        if self.dense is not None:
            dense = lambda: self.dense().conj().T
        return LinearMap(self.adjoint_action, self.shape, self.action, dense)

    def matrix(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense()
        n = self.size
        out = np.empty((n, n), dtype=complex)
        e = np.zeros(n, dtype=complex)
        for j in range(n):
            e[j] = 1.0
            out[:, j] = self.action(e.reshape(self.shape)).ravel()
            e[j] = 0.0
        return out

    def as_operator(self) -> LinearOperator:
        n, shp = self.size, self.shape
        mv = lambda v: self.action(np.asarray(v).reshape(shp)).ravel()
        rmv = None
        if self.adjoint_action is not None:
            rmv = lambda v: self.adjoint_action(np.asarray(v).reshape(shp)).ravel()
        return LinearOperator((n, n), matvec=mv, rmatvec=rmv, dtype=complex)


class SylvesterSolver:
    """Bartels-Stewart solver for ``A X + X B = C`` with cached Schur forms.

    Factorising once and solving many right-hand sides is what makes it
    usable as a Krylov preconditioner.
    """

    def __init__(self, A, B, tol=1e-13):
        A = np.asarray(A, dtype=complex)
        B = np.asarray(B, dtype=complex)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or B.shape != A.shape:
            raise ValueError("A and B must be square and of equal shape")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("non-finite entries in Sylvester operands")
        self.TA, self.UA = sla.schur(A, output="complex")
        self.TB, self.UB = sla.schur(B, output="complex")
        scale = np.linalg.norm(A) + np.linalg.norm(B)
        gap = np.min(np.abs(np.diag(self.TA)[:, None] + np.diag(self.TB)[None, :]))
        self.gap = gap
        if gap <= tol * max(scale, 1e-300):
            raise SingularSpectrum(
                f"spectra of A and -B overlap (separation {gap:.3e}, scale {scale:.3e})"
            )

    def __call__(self, C):
        C = np.asarray(C, dtype=complex)
        F = self.UA.conj().T @ C @ self.UB
        Y, scale, info = ztrsyl(self.TA, self.TB, F)
        if info < 0:
            raise ValueError(f"ztrsyl argument {-info} invalid")
        if info == 1:
            raise SingularSpectrum("ztrsyl perturbed eigenvalues; A and -B nearly share an eigenvalue")
        return self.UA @ (Y / scale) @ self.UB.conj().T


def solve_sylvester(A, B, C):
    """Solve ``A X + X B = C`` for square complex matrices.

    Raises
    ------
    SingularSpectrum
        If an eigenvalue of ``A`` coincides with one of ``-B``.
    """
    C = np.asarray(C, dtype=complex)
    if not np.all(np.isfinite(C)):
        raise ValueError("non-finite entries in right-hand side")
    return SylvesterSolver(A, B)(C)


def _gmres(op, b, x0, rtol, maxiter, precond):
    n = b.size
    restart = min(n, 200)
    count = [0]

    def mv(v):
        count[0] += 1
        return op(v)

    A = LinearOperator((n, n), matvec=mv, dtype=complex)
    M = None
    if precond is not None:
        M = LinearOperator((n, n), matvec=precond, dtype=complex)
    x, info = gmres(
        A, b, x0=x0, rtol=rtol, atol=0.0, restart=restart,
        maxiter=max(1, maxiter // restart), M=M,
    )
    return x, count[0]


def solve_linear(m: LinearMap, rhs, *, x0=None, tol=1e-12, maxiter=None,
                 preconditioner=None, method="auto"):
    """Solve ``m(X) = rhs`` for a nonsingular map.

    ``method`` is ``"dense"`` (LU of the explicit matrix), ``"krylov"``
    (preconditioned GMRES) or ``"auto"`` (dense up to 256 unknowns).
    """
    rhs = np.asarray(rhs, dtype=complex)
    shp = m.shape
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros_like(rhs)
    if method == "auto":
        method = "dense" if m.size <= 256 else "krylov"
    if method == "dense":
        x = sla.solve(m.matrix(), rhs.ravel()).reshape(shp)
    else:
        maxiter = maxiter or 50 * m.size
        pc = None
        if preconditioner is not None:
            pc = lambda v: preconditioner(np.asarray(v).reshape(shp)).ravel()
        op = lambda v: m(np.asarray(v).reshape(shp)).ravel()
        x0v = None if x0 is None else np.asarray(x0, dtype=complex).ravel()
        xv, _ = _gmres(op, rhs.ravel(), x0v, tol, maxiter, pc)
        x = xv.reshape(shp)
    res = np.linalg.norm(m(x) - rhs)
    if not np.isfinite(res) or res > 1e-8 * bnorm:
        raise IllConditioned(f"linear solve stagnated: relative residual {res / bnorm:.3e}")
    return x


def solve_singular_linear(m: LinearMap, rhs, null_left, null_right, *, x0=None,
                          tol=1e-12, maxiter=None, preconditioner=None, method="auto"):
    """Solve ``m(X) = rhs`` for a map with a one-dimensional kernel.

    ``null_right`` spans the kernel of ``m`` and ``null_left`` the kernel of
    its adjoint. The component of ``rhs`` outside the range of ``m`` is
    removed by an oblique projection along ``null_right``; the returned
    solution is the unique one with ``<null_right, X> = 0``.

    The kernel is deflated explicitly by solving
    ``m(X) + u <v, X> = b`` with ``u, v`` the normalised null vectors;
    that operator is nonsingular whenever the kernel is simple.
    """
    rhs = np.asarray(rhs, dtype=complex)
    nl = np.asarray(null_left, dtype=complex)
    nr = np.asarray(null_right, dtype=complex)
    d = m.dim
    u = nl / np.linalg.norm(nl)
    v = nr / np.linalg.norm(nr)

    overlap = inner(u, v)
    if abs(overlap) > 1e-8:
        b = rhs - v * (inner(u, rhs) / overlap)
    else:
        b = rhs - u * inner(u, rhs)
    bnorm = np.linalg.norm(b)
    if bnorm <= 1e-15 * max(np.linalg.norm(rhs), 1e-300):
        return np.zeros_like(rhs)

    scale = max(1.0, _norm_estimate(m))
    if method == "auto":
        method = "dense" if m.size <= 256 else "krylov"
    if method == "dense":
        A = m.matrix() + scale * np.outer(u.ravel(), v.ravel().conj())
        x = sla.solve(A, b.ravel()).reshape(d, d)
    else:
        maxiter = maxiter or 50 * d * d

        def op(w):
            w = np.asarray(w).reshape(d, d)
            return (m(w) + scale * u * inner(v, w)).ravel()

        pc = None
        if preconditioner is not None:
            pc = lambda w: preconditioner(np.asarray(w).reshape(d, d)).ravel()
        x0v = None if x0 is None else np.asarray(x0, dtype=complex).ravel()
        xv, _ = _gmres(op, b.ravel(), x0v, tol, maxiter, pc)
        x = xv.reshape(d, d)

    x = x - v * inner(v, x)
    res = np.linalg.norm(m(x) - b)
    if not np.isfinite(res) or res > 1e-8 * bnorm:
        raise IllConditioned(f"singular solve stagnated: relative residual {res / bnorm:.3e}")
    return x


def _norm_estimate(m: LinearMap):
    d = m.dim
    probe = np.ones((d, d), dtype=complex) / d
    return float(np.linalg.norm(m(probe)) / np.linalg.norm(probe))


def _combine(y, k, a):
    if isinstance(y, tuple):
        return tuple(_combine(yi, ki, a) for yi, ki in zip(y, k))
    return y + a * k


def _finite(k):
    if isinstance(k, tuple):
        return all(_finite(ki) for ki in k)
    return bool(np.all(np.isfinite(k)))


def ode_step_rk4(f, y, t, dt):
    """One classical fourth-order Runge-Kutta step of ``dy/dt = f(t, y)``.

    ``y`` may be an array or a (nested) tuple of arrays; ``f`` must return
    the same structure.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    k1 = f(t, y)
    if not _finite(k1):
        raise NonFiniteDerivative(f"stage 1 non-finite at t={t}")
    k2 = f(t + dt / 2, _combine(y, k1, dt / 2))
    if not _finite(k2):
        raise NonFiniteDerivative(f"stage 2 non-finite at t={t}")
    k3 = f(t + dt / 2, _combine(y, k2, dt / 2))
    if not _finite(k3):
        raise NonFiniteDerivative(f"stage 3 non-finite at t={t}")
    k4 = f(t + dt, _combine(y, k3, dt))
    if not _finite(k4):
        raise NonFiniteDerivative(f"stage 4 non-finite at t={t}")
    incr = _combine(_combine(_combine(k1, k2, 2.0), k3, 2.0), k4, 1.0)
    return _combine(y, incr, dt / 6)
