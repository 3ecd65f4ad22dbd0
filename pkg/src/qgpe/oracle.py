"""Reference computations that do not go through the cMPS machinery.

* exact ground-state energy of the Lieb-Liniger gas from Lieb's integral
  equation,
* mean-field and Bogoliubov closed forms,
* a brute-force lattice MPS obtained by discretising a cMPS with a truncated
  boson occupation per site.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from .cmps import FiniteCMPS, UniformCMPS
from .errors import NoConvergence, ResourceLimit

__all__ = [
    "BetheSolution",
    "solve_bethe",
    "bethe_ground_energy",
    "bethe_energy_function",
    "bogoliubov_dispersion",
    "bogoliubov_static_response",
    "bogoliubov_dynamic_response",
    "mean_field_ground_state",
    "LatticeObservables",
    "lattice_discretization_oracle",
    "lattice_tangent_overlap",
    "richardson_extrapolate",
    "extrapolated_lattice_observables",
]


# -- Lieb-Liniger exact solution ------------------------------------------------

@dataclass(frozen=True)
class BetheSolution:
    """Exact ground state at coupling ``gamma``; ``E / L = e * rho^3``.

    ``lam`` is the Fermi-sea edge in units where the rapidities fill ``[-1, 1]``.
    """

    gamma: float
    e: float
    lam: float
    n_quad: int


def _lieb_at_lambda(lam, x, w):
    """Solve ``g(x) - (lam/pi) int g(y) / (lam^2 + (x-y)^2) dy = 1/(2 pi)`` on Gauss nodes."""
    kern = (lam / math.pi) / (lam**2 + (x[:, None] - x[None, :]) ** 2)
    A = np.eye(x.size) - kern * w[None, :]
    g = np.linalg.solve(A, np.full(x.size, 1 / (2 * math.pi)))
    norm = float(w @ g)
    return lam / norm, (lam / norm) ** 3 / lam**3 * float(w @ (x**2 * g))


def solve_bethe(gamma: float, n_quad: int = 256) -> BetheSolution:
    """Solve Lieb's equation by Gauss-Legendre Nystrom discretisation.

    The edge ``lam`` is found by Brent's method on ``log lam`` so that
    ``gamma(lam) = lam / int g`` hits the target.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if n_quad < 64:
        raise ValueError("n_quad must be at least 64")
    x, w = np.polynomial.legendre.leggauss(n_quad)

    def mismatch(loglam):
        return math.log(_lieb_at_lambda(math.exp(loglam), x, w)[0]) - math.log(gamma)

    # below lam ~ e^-4 the kernel is narrower than the node spacing (gamma < ~1e-3)
    lo, hi = -4.0, 12.0
    if mismatch(lo) > 0 or mismatch(hi) < 0:
        raise NoConvergence(f"gamma={gamma} outside the bracketed range")
    loglam, res = brentq(mismatch, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                         maxiter=500, full_output=True)
    if not res.converged:
        raise NoConvergence("root search for the Fermi edge did not converge")
    lam = math.exp(loglam)
    _, e = _lieb_at_lambda(lam, x, w)
    return BetheSolution(gamma, e, lam, n_quad)


def bethe_ground_energy(gamma: float, n_quad: int = 256) -> float:
    """Dimensionless ground-state energy ``e(gamma)``, ``E / L = e(gamma) rho^3``."""
    return solve_bethe(gamma, n_quad).e


@functools.lru_cache(maxsize=256)
def bethe_energy_function(gamma: float) -> float:
    """Cached :func:`bethe_ground_energy` at the default resolution."""
    return bethe_ground_energy(float(gamma))


# -- closed forms ----------------------------------------------------------------

def bogoliubov_dispersion(k, g: float, rho: float):
    """``sqrt(k^4 + 4 g rho k^2)``."""
    if g < 0 or rho < 0:
        raise ValueError("g and rho must be non-negative")
    k = np.asarray(k, dtype=float)
    return np.sqrt(k**4 + 4 * g * rho * k**2)


def bogoliubov_static_response(k, g: float, rho: float):
    """Mean-field static density response per unit potential amplitude, ``2 rho / (k^2 + 4 g rho)``."""
    k = np.asarray(k, dtype=float)
    return 2 * rho / (k**2 + 4 * g * rho)


def bogoliubov_dynamic_response(k, omega, g: float, rho: float):
    """Mean-field density response ``2 rho k^2 / (k^4 + 4 g rho k^2 - omega^2)``."""
    k = np.asarray(k, dtype=float)
    return 2 * rho * k**2 / (k**4 + 4 * g * rho * k**2 - np.asarray(omega) ** 2)


def mean_field_ground_state(g: float, mu: float):
    """Minimiser of ``-mu n + g n^2``: returns ``(n, e) = (mu / 2g, -mu^2 / 4g)``."""
    if not (g > 0 and mu > 0):
        raise ValueError("needs g > 0 and mu > 0")
    return mu / (2 * g), -mu**2 / (4 * g)


# -- lattice discretisation -------------------------------------------------------

@dataclass(frozen=True)
class LatticeObservables:
    """Lattice estimates; profiles for finite states, scalars for uniform ones."""

    dx: float
    density: object
    pair_correlation: object
    energy_density: object
    kinetic: object


def _site_tensors(Q, R, dx, cutoff):
    """``A[n] = <n| site tensor`` in the normalised occupation basis."""
    D = Q.shape[0]
    A = [np.eye(D) + dx * Q]
    Rn = np.eye(D, dtype=complex)
    for n in range(1, cutoff + 1):
        Rn = Rn @ R
        A.append(dx ** (n / 2) * Rn / math.sqrt(math.factorial(n)))
    return np.array(A)


def _lowered(A):
    """Tensors of ``a |site>``: ``a |n> = sqrt(n) |n-1>``."""
    cutoff = A.shape[0] - 1
    out = np.zeros_like(A)
    for m in range(cutoff):
        out[m] = math.sqrt(m + 1) * A[m + 1]
    return out


def _transfer(A, B=None):
    """``sum_n A[n] (x) conj(B[n])`` acting on row-major ``vec(X)`` as ``X -> sum A X B^dag``."""
    B = A if B is None else B
    return sum(np.kron(a, b.conj()) for a, b in zip(A, B))


def _check_caps(D, cutoff, sites=None):
    if D > 4 or cutoff > 3 or (sites is not None and sites > 64):
        raise ResourceLimit(f"lattice oracle limited to D<=4, cutoff<=3, <=64 sites (got D={D}, cutoff={cutoff}, sites={sites})")


def _uniform_fixed_points(E):
    w, Vr = sla.eig(E)
    i = int(np.argmax(w.real))
    wl, Vl = sla.eig(E.conj().T)
    j = int(np.argmin(abs(wl - w[i].conj())))
    r, l = Vr[:, i], Vl[:, j]
    lam = w[i]
    return lam, l / np.vdot(l, r).conj(), r


def lattice_discretization_oracle(state, dx: float, fock_cutoff: int = 3, length: Optional[float] = None,
                                  g: float = 0.0, v: float = 0.0) -> LatticeObservables:
    """Observables of the lattice MPS ``A[0] = I + dx Q``, ``A[n] = dx^(n/2) R^n / sqrt(n!)``.

    Uniform states are evaluated in the thermodynamic limit; finite states on
    the ``N - 1`` sites of their grid (``dx`` is then the grid spacing and
    ``length`` is ignored). Discretisation errors are ``O(dx)``.
    """
    if isinstance(state, UniformCMPS):
        return _lattice_uniform(state, dx, fock_cutoff, g, v)
    return _lattice_finite(state, fock_cutoff, g, v)


def _lattice_uniform(state, dx, cutoff, g, v):
    D = state.D
    _check_caps(D, cutoff)
    A = _site_tensors(state.Q, state.R, dx, cutoff)
    E = _transfer(A)
    lam, l, r = _uniform_fixed_points(E)
    A = A / np.sqrt(lam)
    At = _lowered(A)
    occ = np.arange(cutoff + 1)

    def single(weights):
        T = sum(wn * np.kron(a, a.conj()) for wn, a in zip(weights, A))
        return complex(np.vdot(l, T @ r))

    n = single(occ).real / dx
    g2 = single(occ * (occ - 1)).real / dx**2
    # two-site (a_{j+1} - a_j): amplitudes X^{nm} = A^n At^m - At^n A^m
    X = np.einsum("nij,mjk->nmik", A, At) - np.einsum("nij,mjk->nmik", At, A)
    T2 = sum(np.kron(X[a, b], X[a, b].conj()) for a in range(cutoff + 1) for b in range(cutoff + 1))
    kin = complex(np.vdot(l, T2 @ r)).real / dx**3
    return LatticeObservables(dx, n, g2, kin + v * n + g * g2, kin)


def _lattice_finite(state: FiniteCMPS, cutoff, g, v):
    D, N, dx = state.D, state.N, state.dx
    _check_caps(D, cutoff, N - 1)
    # site j sits at the midpoint of interval j
    Qm = 0.5 * (state.Qs[:-1] + state.Qs[1:])
    Rm = 0.5 * (state.Rs[:-1] + state.Rs[1:])
    As = [_site_tensors(Qm[j], Rm[j], dx, cutoff) for j in range(N - 1)]
    Es = [_transfer(A) for A in As]
    left = [np.outer(state.v1.conj(), state.v1).ravel()]
    for E in Es:
        left.append(left[-1] @ E)
    right = [np.outer(state.v2, state.v2.conj()).ravel()]
    for E in reversed(Es):
        right.append(E @ right[-1])
    right = right[::-1]
    norm = complex(left[-1] @ right[-1]).real
    occ = np.arange(cutoff + 1)
    M = N - 1
    dens = np.empty(M)
    pair = np.empty(M)
    kin = np.full(M, np.nan)
    for j, A in enumerate(As):
        Tn = sum(o * np.kron(a, a.conj()) for o, a in zip(occ, A))
        Tp = sum(o * (o - 1) * np.kron(a, a.conj()) for o, a in zip(occ, A))
        dens[j] = complex(left[j] @ Tn @ right[j + 1]).real / norm / dx
        pair[j] = complex(left[j] @ Tp @ right[j + 1]).real / norm / dx**2
    for j in range(M - 1):
        A, B = As[j], As[j + 1]
        X = np.einsum("nij,mjk->nmik", A, _lowered(B)) - np.einsum("nij,mjk->nmik", _lowered(A), B)
        T2 = sum(np.kron(X[a, b], X[a, b].conj()) for a in range(cutoff + 1) for b in range(cutoff + 1))
        kin[j] = complex(left[j] @ T2 @ right[j + 2]).real / norm / dx**3
    vv = np.broadcast_to(np.asarray(v, dtype=float), (M,)) if np.ndim(v) else v
    return LatticeObservables(dx, dens, pair, kin + vv * dens + g * pair, kin)


def lattice_tangent_overlap(state: UniformCMPS, tv1, tv2, dx: float, fock_cutoff: int = 3) -> complex:
    """Per-unit-length overlap of two uniform tangent vectors on the lattice.

    The site tensor derivative along ``(V, W)`` is ``B[0] = dx V``,
    ``B[n] = dx^(n/2) d(R^n) / sqrt(n!)``. Same-site and both orderings of
    distinct-site insertions are summed; the divergent disconnected part
    (proportional to the number of sites) is excluded.
    """
    D = state.D
    _check_caps(D, fock_cutoff)
    A = _site_tensors(state.Q, state.R, dx, fock_cutoff)

    def dtensor(V, W):
        out = [dx * V]
        for n in range(1, fock_cutoff + 1):
            # derivative of R^n along W
            d = sum(np.linalg.matrix_power(state.R, a) @ W @ np.linalg.matrix_power(state.R, n - 1 - a)
                    for a in range(n))
            out.append(dx ** (n / 2) * d / math.sqrt(math.factorial(n)))
        return np.array(out)

    B1 = dtensor(tv1.V, tv1.W)
    B2 = dtensor(tv2.V, tv2.W)
    E = _transfer(A)
    lam, l, r = _uniform_fixed_points(E)
    E = E / lam
    s = 1 / lam
    same = s * np.vdot(l, _transfer(B2, B1) @ r)
    Eket = s * _transfer(B2, A)
    Ebra = s * _transfer(A, B1)
    P = np.outer(r, l.conj())
    n2 = E.shape[0]
    pinv = np.linalg.solve(np.eye(n2) - E + P, np.eye(n2) - P)
    cross = np.vdot(l, Eket @ pinv @ Ebra @ r) + np.vdot(l, Ebra @ pinv @ Eket @ r)
    return complex((same + cross) / dx)


def richardson_extrapolate(hs: Sequence[float], values: Sequence[float]):
    """Value at ``h = 0`` of the interpolating polynomial through ``(h, value)`` pairs."""
    hs = np.asarray(hs, dtype=float)
    vals = np.asarray(values)
    if hs.size != vals.shape[0] or hs.size < 2:
        raise ValueError("need at least two matching samples")
    out = vals.astype(complex) if np.iscomplexobj(vals) else vals.astype(float)
    # Neville's recursion evaluated at 0
    p = list(out)
    n = hs.size
    for m in range(1, n):
        for i in range(n - m):
            p[i] = (hs[i + m] * p[i] - hs[i] * p[i + 1]) / (hs[i + m] - hs[i])
    return p[0]


def extrapolated_lattice_observables(state: UniformCMPS, g: float = 0.0, v: float = 0.0,
                                     dxs=(1e-2, 5e-3, 2.5e-3, 1.25e-3, 6.25e-4), fock_cutoff: int = 3) -> dict:
    """Richardson-extrapolated lattice density, pair correlation and energy density.

    The kinetic term needs ``fock_cutoff >= 3``: with double occupancy as the
    highest level, ``a`` acting on it has no triple-occupancy partner and the
    difference ``a_{j+1} - a_j`` keeps an ``O(dx^1.5)`` remainder.
    """
    obs = [_lattice_uniform(state, dx, fock_cutoff, g, v) for dx in dxs]
    keys = ("density", "pair_correlation", "energy_density")
    return {k: float(richardson_extrapolate(dxs, [getattr(o, k) for o in obs])) for k in keys}
