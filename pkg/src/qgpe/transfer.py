"""Transfer generators, reduced density matrices and local observables.

Convention: ``<rho_L| A (x) conj(B) |rho_R> = tr(rho_L A rho_R B^dagger)``.
The left generator acts as ``rho -> Q^dag rho + rho Q + R^dag rho R`` and the
right one as ``rho -> Q rho + rho Q^dag + R rho R^dag``; they are Frobenius
adjoints of each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import ArpackNoConvergence, eigs

from .cmps import FiniteCMPS, UniformCMPS, covariant_derivative_x
from .errors import NonFiniteDerivative, NonInjective
from .numerics import LinearMap, dag, solve_linear

__all__ = [
    "DensityMatrices",
    "apply_transfer_left",
    "apply_transfer_right",
    "transfer_left_map",
    "transfer_right_map",
    "transfer_propagator",
    "dominant_left_fixed_point",
    "fixed_point_density",
    "propagate_density",
    "particle_density",
    "pair_correlation",
    "energy_density",
    "midpoints",
]


@dataclass(frozen=True, eq=False)
class DensityMatrices:
    """Left/right reduced density matrices.

    For uniform states ``rhoL``, ``rhoR`` are single ``(D, D)`` matrices with
    ``tr(rhoL rhoR) = 1`` and ``eigenvalue`` is the dominant generator
    eigenvalue (zero for normalised states). For finite states they are
    ``(N, D, D)`` stacks, ``norm`` is ``tr(rhoL(x) rhoR(x))`` per point and
    ``min_eig_L`` / ``min_eig_R`` hold the smallest eigenvalues per point.
    """

    rhoL: np.ndarray
    rhoR: np.ndarray
    norm: np.ndarray
    eigenvalue: float = 0.0
    min_eig_L: Optional[np.ndarray] = None
    min_eig_R: Optional[np.ndarray] = None


def apply_transfer_left(Q, R, rho):
    """``Q^dag rho + rho Q + R^dag rho R``."""
    return dag(Q) @ rho + rho @ Q + dag(R) @ rho @ R


def apply_transfer_right(Q, R, rho):
    """``Q rho + rho Q^dag + R rho R^dag``."""
    return Q @ rho + rho @ dag(Q) + R @ rho @ dag(R)


def _kron_left(Q, R):
    D = Q.shape[0]
    eye = np.eye(D)
    return np.kron(dag(Q), eye) + np.kron(eye, Q.T) + np.kron(dag(R), R.T)


def _kron_right(Q, R):
    D = Q.shape[0]
    eye = np.eye(D)
    return np.kron(Q, eye) + np.kron(eye, Q.conj()) + np.kron(R, R.conj())


def transfer_left_map(Q, R, shift=0.0) -> LinearMap:
    """``rho -> T_L(rho) + shift * rho`` as a :class:`LinearMap`."""
    D = Q.shape[0]
    return LinearMap(
        lambda x: apply_transfer_left(Q, R, x) + shift * x,
        (D, D),
        lambda x: apply_transfer_right(Q, R, x) + np.conj(shift) * x,
        lambda: _kron_left(Q, R) + shift * np.eye(D * D),
    )


def transfer_right_map(Q, R, shift=0.0) -> LinearMap:
    """``rho -> T_R(rho) + shift * rho`` as a :class:`LinearMap`."""
    D = Q.shape[0]
    return LinearMap(
        lambda x: apply_transfer_right(Q, R, x) + shift * x,
        (D, D),
        lambda x: apply_transfer_left(Q, R, x) + np.conj(shift) * x,
        lambda: _kron_right(Q, R) + shift * np.eye(D * D),
    )


def transfer_propagator(Q, R, length) -> LinearMap:
    """Right action of ``E(0, length) = exp(length * T)`` for a uniform state."""
    D = Q.shape[0]
    E = sla.expm(length * _kron_right(Q, R))
    return LinearMap(lambda x: (E @ x.ravel()).reshape(D, D), (D, D),
                     lambda x: (E.conj().T @ x.ravel()).reshape(D, D), lambda: E)


def _hermitian_normalised(v, D):
    rho = v.reshape(D, D)
    tr = np.trace(rho)
    rho = rho * (abs(tr) / tr)
    return 0.5 * (rho + dag(rho))


def dominant_left_fixed_point(Q, R):
    """Dominant eigenvalue and Hermitian eigenvector of the left generator.

    Returns ``(lambda, rho_L)`` with ``tr(rho_L) > 0``.
    """
    D = Q.shape[0]
    if D <= 16:
        w, V = sla.eig(_kron_left(Q, R))
        order = np.argsort(-w.real)
        if D > 1 and abs(w[order[0]] - w[order[1]]) < 1e-10 * max(1.0, abs(w[order[0]])):
            raise NonInjective("dominant eigenvalue of the transfer generator is degenerate")
        lam = w[order[0]]
        v = V[:, order[0]]
    else:
        m = transfer_left_map(Q, R).as_operator()
        try:
            w, V = eigs(m, k=2, which="LR", tol=1e-14, maxiter=50 * D * D)
        except ArpackNoConvergence as exc:
            raise NonInjective("Arnoldi iteration for the fixed point did not converge") from exc
        order = np.argsort(-w.real)
        if abs(w[order[0]] - w[order[1]]) < 1e-10 * max(1.0, abs(w[order[0]])):
            raise NonInjective("dominant eigenvalue of the transfer generator is degenerate")
        lam = w[order[0]]
        v = V[:, order[0]]
    return float(lam.real), _hermitian_normalised(v, D)


NONINJECTIVE_RCOND = 1e-10


def _canonical_right_fixed_point(Q, R):
    """Right fixed point of a left-canonical state, ``tr(rho) = 1``.

    ``T_R`` has left null vector ``I``, so ``T_R(rho) + I tr(rho) = I`` is
    nonsingular and its solution is the normalised fixed point.
    """
    D = Q.shape[0]
    eye = np.eye(D, dtype=complex)
    if D <= 16:
        A = _kron_right(Q, R) + np.outer(eye.ravel(), eye.ravel())
        getrf, getrs, gecon = sla.get_lapack_funcs(("getrf", "getrs", "gecon"), (A,))
        lu, piv, info = getrf(A)
        rcond = gecon(lu, np.linalg.norm(A, 1), norm="1")[0] if info == 0 else 0.0
        if not rcond >= NONINJECTIVE_RCOND:
            # a second (near) zero mode of the generator
            raise NonInjective(f"right fixed point is not unique (reciprocal condition {rcond:.2e})")
        rho = getrs(lu, piv, eye.ravel())[0].reshape(D, D)
    else:
        m = LinearMap(lambda x: apply_transfer_right(Q, R, x) + eye * np.trace(x), (D, D))
        rho = solve_linear(m, eye, method="krylov")
    return 0.5 * (rho + dag(rho))


def fixed_point_density(state: UniformCMPS, canonical: Optional[bool] = None) -> DensityMatrices:
    """Fixed points of the uniform transfer generators, ``tr(rhoL rhoR) = 1``.

    Left-canonical input (residual < 1e-10) gets ``rhoL = I`` exactly and
    ``rhoR`` from a deflated linear solve; otherwise both dominant
    eigenvectors are computed.
    """
    Q, R = state.Q, state.R
    D = state.D
    if canonical is None:
        canonical = state.is_left_canonical()
    if canonical:
        rhoL = np.eye(D, dtype=complex)
        rhoR = _canonical_right_fixed_point(Q, R)
        lam = 0.0
    else:
        lam, rhoL = dominant_left_fixed_point(Q, R)
        Qs = Q - 0.5 * lam * np.eye(D)
        _, rhoR = dominant_left_fixed_point(dag(Qs), dag(R))
        rhoL = rhoL * (D / np.trace(rhoL).real)
    rhoR = rhoR / np.trace(rhoL @ rhoR).real
    return DensityMatrices(rhoL, rhoR, np.asarray(1.0), lam)


def midpoints(F):
    """Fourth-order interpolation of a grid stack to the interval midpoints."""
    F = np.asarray(F)
    N = F.shape[0]
    out = np.empty((N - 1,) + F.shape[1:], dtype=F.dtype)
    if N == 3:
        out[0] = (3 * F[0] + 6 * F[1] - F[2]) / 8
        out[1] = (3 * F[2] + 6 * F[1] - F[0]) / 8
        return out
    out[1:-1] = (-F[:-3] + 9 * F[1:-2] + 9 * F[2:-1] - F[3:]) / 16
    out[0] = (5 * F[0] + 15 * F[1] - 5 * F[2] + F[3]) / 16
    out[-1] = (5 * F[-1] + 15 * F[-2] - 5 * F[-3] + F[-4]) / 16
    return out


def _rk4_sweep(gen, rho0, Qs, Rs, Qm, Rm, dx, reverse):
    """RK4 sweep of ``d rho / ds = gen(Q, R, rho)`` with ``s = x`` (forward) or ``s = -x`` (reverse)."""
    N = Qs.shape[0]
    out = np.empty((N,) + rho0.shape, dtype=complex)
    idx = range(N - 1, 0, -1) if reverse else range(N - 1)
    h = dx
    rho = rho0
    out[N - 1 if reverse else 0] = rho
    for i in idx:
        j = i - 1 if reverse else i + 1
        m = i - 1 if reverse else i
        k1 = gen(Qs[i], Rs[i], rho)
        k2 = gen(Qm[m], Rm[m], rho + 0.5 * h * k1)
        k3 = gen(Qm[m], Rm[m], rho + 0.5 * h * k2)
        k4 = gen(Qs[j], Rs[j], rho + h * k3)
        rho = rho + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        rho = 0.5 * (rho + dag(rho))
        if not np.all(np.isfinite(rho)):
            raise NonFiniteDerivative(f"density matrix overflow at grid index {j}")
        out[j] = rho
    return out


def propagate_density(state: FiniteCMPS) -> DensityMatrices:
    """Integrate the left ODE forward from ``v1 v1^dag`` and the right ODE backward from ``v2 v2^dag``."""
    Qs, Rs, dx = state.Qs, state.Rs, state.dx
    Qm, Rm = midpoints(Qs), midpoints(Rs)
    v1, v2 = state.v1, state.v2
    rhoL = _rk4_sweep(apply_transfer_left, np.outer(v1, v1.conj()), Qs, Rs, Qm, Rm, dx, False)
    rhoR = _rk4_sweep(apply_transfer_right, np.outer(v2, v2.conj()), Qs, Rs, Qm, Rm, dx, True)
    norm = np.einsum("nij,nji->n", rhoL, rhoR).real
    return DensityMatrices(
        rhoL, rhoR, norm,
        min_eig_L=np.linalg.eigvalsh(rhoL)[:, 0],
        min_eig_R=np.linalg.eigvalsh(rhoR)[:, 0],
    )


def _local(state, dens, x):
    """Per-point operands (``R``, ``rhoL``, ``rhoR``, ``norm``), restricted to ``x`` if given."""
    if isinstance(state, UniformCMPS):
        return state.R, dens.rhoL, dens.rhoR, float(np.real(np.trace(dens.rhoL @ dens.rhoR)))
    return state.Rs, dens.rhoL, dens.rhoR, dens.norm


def _sandwich(rhoL, A, rhoR, B):
    """``tr(rhoL A rhoR B^dag)`` (batched over leading axes)."""
    return np.einsum("...ij,...jk,...kl,...il->...", rhoL, A, rhoR, B.conj()).real


def _at(state, values, x):
    if x is None or isinstance(state, UniformCMPS):
        return values
    return np.interp(x, state.grid, values)


def particle_density(state, dens: DensityMatrices, x=None):
    """``<psi^dag psi>(x) = tr(rhoL R rhoR R^dag) / norm``.

    For finite states ``x=None`` returns the profile on the grid and a
    position returns the linearly interpolated value.
    """
    R, rhoL, rhoR, norm = _local(state, dens, x)
    return _at(state, _sandwich(rhoL, R, rhoR, R) / norm, x)


def pair_correlation(state, dens: DensityMatrices, x=None):
    """``<psi^dag psi^dag psi psi>(x) = tr(rhoL R^2 rhoR (R^dag)^2) / norm``."""
    R, rhoL, rhoR, norm = _local(state, dens, x)
    R2 = R @ R
    return _at(state, _sandwich(rhoL, R2, rhoR, R2) / norm, x)


def kinetic_density(state, dens: DensityMatrices, x=None):
    """``<d psi^dag d psi>(x) = tr(rhoL DxR rhoR DxR^dag) / norm``."""
    _, rhoL, rhoR, norm = _local(state, dens, x)
    K = covariant_derivative_x(state)
    return _at(state, _sandwich(rhoL, K, rhoR, K) / norm, x)


def energy_density(state, dens: DensityMatrices, g: float, v=0.0, x=None):
    """Kinetic + ``v * n`` + ``g * g2`` energy density.

    ``v`` is a scalar or, for finite states, a per-point array.
    """
    kin = kinetic_density(state, dens)
    n = particle_density(state, dens)
    g2 = pair_correlation(state, dens)
    return _at(state, kin + np.asarray(v) * n + g * g2, x)
