"""Variational (TDVP) flow of cMPS for the Lieb-Liniger model.

Real-time flow::

    i D_t R = -D_x^2 R + v R + g (rhoL^-1 R^dag rhoL) R^2 + g R^2 (rhoR R^dag rhoR^-1)
              - (rhoL^-1 R^dag rhoL) [R, D_x R] - [R, D_x R] (rhoR R^dag rhoR^-1)

with ``D_t R = dR/dt + [P, R]`` and the gauge potential
``P = -i R^dag D_x R + i F``. Imaginary time is ``t -> -i tau``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .cmps import (
    FiniteCMPS,
    UniformCMPS,
    covariant_derivative_x,
    ddx,
    random_uniform_state,
)
from .errors import (
    GaugeFixingViolated,
    NoConvergence,
    NonFiniteDerivative,
    NonInjective,
    QGPEError,
    SingularDensity,
    StepTooLarge,
)
from .numerics import comm, dag, ode_step_rk4, solve_singular_linear
from .transfer import (
    DensityMatrices,
    apply_transfer_left,
    energy_density,
    fixed_point_density,
    midpoints,
    particle_density,
    propagate_density,
    transfer_left_map,
)

log = logging.getLogger(__name__)

__all__ = [
    "LiebLinigerParams",
    "TangentVector",
    "GaugePotential",
    "Trajectory",
    "interaction_kernel",
    "solve_F",
    "solve_F_finite",
    "choose_P",
    "qgpe_rhs_uniform",
    "qgpe_rhs_finite",
    "tangent_metric",
    "uniform_energy",
    "finite_energy",
    "imaginary_time_ground_state",
    "imaginary_time_finite",
    "real_time_evolve",
    "chemical_potential_for_gamma",
    "ground_state_at_gamma",
]


@dataclass(frozen=True)
class LiebLinigerParams:
    """Coupling ``g``, chemical potential ``mu`` and optional external potential.

    The one-body potential is ``v(x) = -mu + v_ext(x)``; ``v_ext`` is either a
    callable of position or an array sampled on the finite grid.
    """

    g: float
    mu: float
    v_ext: Optional[Union[Callable, np.ndarray]] = None

    def __post_init__(self):
        if not (math.isfinite(self.g) and math.isfinite(self.mu)):
            raise ValueError("g and mu must be finite")
        if self.g < 0:
            log.warning("attractive coupling g=%g is experimental", self.g)

    @property
    def v0(self) -> float:
        return -self.mu

    def potential(self, grid=None):
        """``v(x)`` on ``grid`` (scalar ``v0`` when ``grid`` is None)."""
        if grid is None or self.v_ext is None:
            return self.v0 if grid is None else np.full(len(grid), self.v0)
        ext = self.v_ext(np.asarray(grid)) if callable(self.v_ext) else np.asarray(self.v_ext, float)
        if ext.shape != (len(grid),):
            raise ValueError("external potential does not match the grid")
        return self.v0 + ext


@dataclass(frozen=True, eq=False)
class TangentVector:
    """Variations ``V`` of Q, ``W`` of R (single matrices or (N, D, D) stacks).

    ``w1`` and ``w2`` are the boundary-vector variations (finite states);
    ``w1`` varies ``v1`` so that ``v1^dag`` varies by ``w1^dag``.
    """

    V: np.ndarray
    W: np.ndarray
    w1: Optional[np.ndarray] = None
    w2: Optional[np.ndarray] = None

    def __post_init__(self):
        V = np.asarray(self.V, dtype=complex)
        W = np.asarray(self.W, dtype=complex)
        if V.shape != W.shape or V.shape[-1] != V.shape[-2]:
            raise ValueError("V and W must be square and of equal shape")
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "W", W)

    @classmethod
    def gauge_fixed(cls, state: UniformCMPS, W):
        """Uniform tangent vector with ``V = -R^dag W``."""
        W = np.asarray(W, dtype=complex)
        return cls(-dag(state.R) @ W, W)


@dataclass(frozen=True, eq=False)
class GaugePotential:
    P: np.ndarray
    F: np.ndarray


def _inv_checked(rho, what):
    w = np.linalg.eigvalsh(rho)
    if w[0] < 1e-12 * max(abs(w[-1]), 1e-300):
        raise SingularDensity(f"{what} is numerically singular (min eigenvalue {w[0]:.3e})")
    return np.linalg.inv(rho)


def interaction_kernel(state, g: float):
    """``B = g R^2 - [R, D_x R]`` (per grid point for finite states)."""
    R = state.R if isinstance(state, UniformCMPS) else state.Rs
    K = covariant_derivative_x(state)
    return g * (R @ R) - comm(R, K)


def _local_hamiltonian(Q, R, K, g, v):
    """``K^dag K + v R^dag R + g (R^dag)^2 R^2`` (the source of the F equation)."""
    Rd = dag(R)
    v = np.asarray(v)[..., None, None] if np.ndim(v) else v
    return dag(K) @ K + v * (Rd @ R) + g * (Rd @ Rd @ R @ R)


def solve_F(state: UniformCMPS, dens: DensityMatrices, params: LiebLinigerParams):
    """Hermitian ``F`` with ``-(Q^dag F + F Q + R^dag F R) = h - e`` and ``tr(F rhoR) = 0``.

    ``h`` is the local energy operator and ``e = tr(h rhoR)`` the energy
    density; subtracting ``e`` removes the kernel component of the source,
    which would otherwise make the equation unsolvable.
    """
    Q, R = state.Q, state.R
    D = state.D
    K = comm(Q, R)
    h = _local_hamiltonian(Q, R, K, params.g, params.v0)
    rhoR = dens.rhoR
    eye = np.eye(D, dtype=complex)
    F = solve_singular_linear(transfer_left_map(Q, R), -h, rhoR, eye)
    F = F - eye * (np.trace(F @ rhoR) / np.trace(rhoR))
    return 0.5 * (F + dag(F))


def choose_P(state, dens, F) -> GaugePotential:
    """``P = -i R^dag D_x R + i F`` (pointwise for finite states)."""
    R = state.R if isinstance(state, UniformCMPS) else state.Rs
    K = covariant_derivative_x(state)
    return GaugePotential(-1j * dag(R) @ K + 1j * F, F)


def _uniform_W(state, rhoR, params, regularization=0.0):
    """Right-hand side ``W`` of ``i D_t R = W`` for a left-canonical uniform state."""
    Q, R = state.Q, state.R
    K = comm(Q, R)
    B = params.g * (R @ R) - comm(R, K)
    if regularization > 0:
        eps = regularization * np.trace(rhoR).real
        rinv = np.linalg.inv(rhoR + eps * np.eye(state.D))
    else:
        rinv = _inv_checked(rhoR, "right density matrix")
    Rt = rhoR @ dag(R) @ rinv
    return -comm(Q, K) + params.v0 * R + dag(R) @ B + B @ Rt


def qgpe_rhs_uniform(state: UniformCMPS, dens: Optional[DensityMatrices], params: LiebLinigerParams,
                     mode: str = "real", regularization: float = 0.0):
    """``(dQ/dt, dR/dt)`` of the uniform flow in left-canonical gauge.

    ``mode="imaginary"`` returns the derivative with respect to imaginary
    time ``tau`` (``t = -i tau``), a descent direction of the energy.
    A positive ``regularization`` replaces ``rhoR^-1`` by
    ``(rhoR + regularization * tr(rhoR))^-1``; otherwise a numerically
    singular ``rhoR`` raises :class:`SingularDensity`.
    """
    if mode not in ("real", "imaginary"):
        raise ValueError(f"mode must be 'real' or 'imaginary', got {mode!r}")
    if dens is None:
        dens = fixed_point_density(state, canonical=True)
    R = state.R
    W = _uniform_W(state, dens.rhoR, params, regularization)
    F = solve_F(state, dens, params)
    P = choose_P(state, dens, F).P
    if mode == "real":
        Rdot = -1j * W - comm(P, R)
    else:
        Rdot = -W + 1j * comm(P, R)
    Qdot = -dag(R) @ Rdot
    return Qdot, Rdot


def tangent_metric(state, dens: DensityMatrices, tv1: TangentVector, tv2: TangentVector):
    """Overlap ``<Phi[tv1] | Phi[tv2]>`` of two tangent vectors.

    Uniform states: per unit length, requires the gauge ``V = -R^dag W``
    (relative to ``rhoL``) and evaluates ``tr(rhoL W2 rhoR W1^dag)``.
    Finite states: full double-layer evaluation including boundary vectors,
    normalised by the state norm; no gauge condition is needed.
    """
    if isinstance(state, UniformCMPS):
        rhoL, rhoR = dens.rhoL, dens.rhoR
        Lt = np.linalg.solve(rhoL, dag(state.R) @ rhoL)
        for tv in (tv1, tv2):
            if np.linalg.norm(tv.V + Lt @ tv.W) > 1e-8:
                raise GaugeFixingViolated("tangent vector violates V = -R^dag W")
        norm = np.trace(rhoL @ rhoR)
        return complex(np.trace(rhoL @ tv2.W @ rhoR @ dag(tv1.W)) / norm)
    return _finite_overlap(state, tv1, tv2)


def _finite_overlap(state: FiniteCMPS, bra: TangentVector, ket: TangentVector):
    Qs, Rs, dx = state.Qs, state.Rs, state.dx
    N, D = state.N, state.D
    v1, v2 = state.v1, state.v2
    zero = np.zeros(D, dtype=complex)
    kw1 = zero if ket.w1 is None else np.asarray(ket.w1, complex)
    kw2 = zero if ket.w2 is None else np.asarray(ket.w2, complex)
    bw1 = zero if bra.w1 is None else np.asarray(bra.w1, complex)
    bw2 = zero if bra.w2 is None else np.asarray(bra.w2, complex)
    fields = (Qs, Rs, ket.V, ket.W, bra.V, bra.W)
    mids = tuple(midpoints(f) for f in fields)

    def gen(f, t):
        Q, R, V, W, Vb, Wb = f
        t00, t10, t01, t11 = t
        Tr = lambda X: Q @ X + X @ dag(Q) + R @ X @ dag(R)
        ket_ins = lambda X: V @ X + W @ X @ dag(R)
        bra_ins = lambda X: X @ dag(Vb) + R @ X @ dag(Wb)
        # derivative with respect to -x
        return (
            Tr(t00),
            Tr(t10) + ket_ins(t00),
            Tr(t01) + bra_ins(t00),
            Tr(t11) + ket_ins(t01) + bra_ins(t10) + W @ t00 @ dag(Wb),
        )

    t = (np.outer(v2, v2.conj()), np.outer(kw2, v2.conj()),
         np.outer(v2, bw2.conj()), np.outer(kw2, bw2.conj()))
    add = lambda a, b, s: tuple(x + s * y for x, y in zip(a, b))
    for i in range(N - 1, 0, -1):
        fi = tuple(f[i] for f in fields)
        fm = tuple(m[i - 1] for m in mids)
        fj = tuple(f[i - 1] for f in fields)
        k1 = gen(fi, t)
        k2 = gen(fm, add(t, k1, dx / 2))
        k3 = gen(fm, add(t, k2, dx / 2))
        k4 = gen(fj, add(t, k3, dx))
        t = tuple(x + dx / 6 * (a + 2 * b + 2 * c + d) for x, a, b, c, d in zip(t, k1, k2, k3, k4))
    t00, t10, t01, t11 = t
    val = (v1.conj() @ t11 @ v1 + kw1.conj() @ t01 @ v1
           + v1.conj() @ t10 @ bw1 + kw1.conj() @ t00 @ bw1)
    return complex(val / (v1.conj() @ t00 @ v1).real)


def uniform_energy(state: UniformCMPS, params: LiebLinigerParams, dens=None) -> float:
    """Energy density ``<h>`` including ``-mu n``; any normalisable state."""
    if dens is None:
        dens = fixed_point_density(state)
    return float(energy_density(state, dens, params.g, params.v0))


def finite_energy(state: FiniteCMPS, params: LiebLinigerParams, dens=None) -> float:
    """Total energy ``int e(x) dx`` (trapezoidal) of a finite state."""
    if dens is None:
        dens = propagate_density(state)
    e = energy_density(state, dens, params.g, params.potential(state.grid))
    return float(np.trapezoid(e, state.grid))


# -- finite systems -----------------------------------------------------------

def _regularized_inverse(rho):
    D = rho.shape[-1]
    tr = np.trace(rho, axis1=-2, axis2=-1).real
    eps = 1e-10 * tr / D
    w = np.linalg.eigvalsh(rho)[..., 0]
    floor_hit = w < eps
    inv = np.linalg.inv(rho + eps[..., None, None] * np.eye(D))
    return inv, floor_hit


def solve_F_finite(state: FiniteCMPS, params: LiebLinigerParams):
    """Integrate ``dF/dx = Q^dag F + F Q + R^dag F R + h`` from ``F(x1) = 0`` (RK4)."""
    Qs, Rs, dx = state.Qs, state.Rs, state.dx
    K = covariant_derivative_x(state)
    h = _local_hamiltonian(Qs, Rs, K, params.g, params.potential(state.grid))
    Qm, Rm, hm = midpoints(Qs), midpoints(Rs), midpoints(h)
    F = np.zeros_like(Qs)
    f = lambda Q, R, hh, X: apply_transfer_left(Q, R, X) + hh
    for i in range(state.N - 1):
        X = F[i]
        k1 = f(Qs[i], Rs[i], h[i], X)
        k2 = f(Qm[i], Rm[i], hm[i], X + dx / 2 * k1)
        k3 = f(Qm[i], Rm[i], hm[i], X + dx / 2 * k2)
        k4 = f(Qs[i + 1], Rs[i + 1], h[i + 1], X + dx * k3)
        X = X + dx / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        F[i + 1] = 0.5 * (X + dag(X))
    if not np.all(np.isfinite(F)):
        raise NonFiniteDerivative("F equation overflowed")
    return F


def _second_covariant(state: FiniteCMPS, K):
    """``D_x^2 R = dK/dx + [Q, K]``; Neumann ends use ``K = 0`` with an odd reflection."""
    dx = state.dx
    if state.bc.is_dirichlet:
        dK = ddx(K, dx)
    else:
        K = K.copy()
        K[0] = 0
        K[-1] = 0
        dK = ddx(K, dx)
        dK[0] = K[1] / dx
        dK[-1] = -K[-2] / dx
    return dK + comm(state.Qs, K)


def qgpe_rhs_finite(state: FiniteCMPS, dens: Optional[DensityMatrices], params: LiebLinigerParams,
                    mode: str = "real"):
    """``(dQ/dt, dR/dt, dv1/dt, dv2/dt)`` on the grid.

    Density inverses are regularised as ``(rho + eps)^-1`` with
    ``eps = 1e-10 tr(rho) / D``. Under Dirichlet conditions the end rows of
    ``R`` do not move.
    """
    if mode not in ("real", "imaginary"):
        raise ValueError(f"mode must be 'real' or 'imaginary', got {mode!r}")
    if dens is None:
        dens = propagate_density(state)
    Qs, Rs, dx = state.Qs, state.Rs, state.dx
    N = state.N
    K = covariant_derivative_x(state)
    if not state.bc.is_dirichlet:
        K = K.copy()
        K[0] = 0
        K[-1] = 0
    D2R = _second_covariant(state, K)
    v = params.potential(state.grid)[:, None, None]
    B = params.g * (Rs @ Rs) - comm(Rs, K)
    Linv, hitL = _regularized_inverse(dens.rhoL)
    Rinv, hitR = _regularized_inverse(dens.rhoR)
    interior = slice(1, N - 1)
    hits = np.count_nonzero(hitL[interior] | hitR[interior])
    if hits > 0.1 * max(N - 2, 1):
        raise SingularDensity(f"density regularisation floor hit at {hits} of {N - 2} interior points")
    Lt = Linv @ dag(Rs) @ dens.rhoL
    Rt = dens.rhoR @ dag(Rs) @ Rinv
    W = -D2R + v * Rs + Lt @ B + B @ Rt
    Vsrc = -(Lt @ B @ Rt)

    F = solve_F_finite(state, params)
    P = -1j * dag(Rs) @ K + 1j * F
    dP = ddx(P, dx)
    Rdot = -1j * W - comm(P, Rs)
    Qdot = dP + comm(Qs, P) - 1j * Vsrc
    a, b = (state.bc.a, state.bc.b) if state.bc.is_dirichlet else (0.0, 0.0)
    v1, v2 = state.v1, state.v2
    # v1^dag evolves as v1^dag P(x1) + i conj(a) v1^dag D_x R(x1)
    v1dot = dag(P[0]) @ v1 - 1j * a * (dag(K[0]) @ v1)
    v2dot = -P[-1] @ v2 - 1j * np.conj(b) * (K[-1] @ v2)
    if state.bc.is_dirichlet:
        Rdot[0] = 0
        Rdot[-1] = 0
    if mode == "imaginary":
        Qdot, Rdot, v1dot, v2dot = (-1j * Qdot, -1j * Rdot, -1j * v1dot, -1j * v2dot)
    return Qdot, Rdot, v1dot, v2dot


# -- integrators ---------------------------------------------------------------

def _retract(Q, R):
    """Project ``Q`` onto ``Q + Q^dag + R^dag R = 0`` keeping its antihermitian part."""
    return 0.5 * (Q - dag(Q)) - 0.5 * dag(R) @ R


def _lbfgs_direction(flow, history, metric):
    """Two-loop recursion; ``flow`` is the descent direction (minus the gradient)."""
    q = flow.copy()
    alphas = []
    for s_, y_ in reversed(history):
        rho = 1.0 / metric(y_, s_)
        a = rho * metric(s_, q)
        alphas.append((a, rho))
        q = q - a * y_
    s_, y_ = history[-1]
    q = q * (metric(s_, y_) / metric(y_, y_))
    for (s_, y_), (a, rho) in zip(history, reversed(alphas)):
        b = rho * metric(y_, q)
        q = q + (a - b) * s_
    return q


def _flow_norm(Rd, dens):
    g = math.sqrt(max(np.trace(dag(Rd) @ Rd @ dens.rhoR).real, 0.0))
    if not math.isfinite(g):
        raise NonFiniteDerivative("imaginary-time flow is not finite")
    return g


def _initial_scale(params):
    if params.g > 0 and params.mu > 0:
        return math.sqrt(params.mu / (2 * params.g))
    return 1.0


_STALL_STEPS = 50
_LBFGS_MIN_STEP = 1e-3
_MAX_RESTARTS = 5


def imaginary_time_ground_state(params: LiebLinigerParams, D: int, tol: float = 1e-8,
                                max_steps: int = 100000, seed: int = 0,
                                initial: Optional[UniformCMPS] = None, dtau: float = 0.05,
                                dtau_max: float = 10.0, regularization: float = 1e-14,
                                method: str = "flow", memory: int = 20, real: bool = True,
                                callback: Optional[Callable] = None):
    """Minimise the energy density by adaptive imaginary-time steps.

    Each step moves along the imaginary-time flow, restores the left-canonical
    constraint exactly, and is accepted only if the energy does not increase
    by more than ``1e-12 |E|``; accepted steps grow ``dtau`` by 1.2, rejected
    ones halve it. Iteration stops once the metric norm of the flow is below
    ``tol``. Steps with an energy change inside the round-off band are
    accepted only if they also reduce that norm. ``rhoR^-1`` is regularised
    by ``regularization`` (see :func:`qgpe_rhs_uniform`) because large
    bond dimensions develop Schmidt values near machine precision.

    ``method="lbfgs"`` replaces the bare flow direction by a limited-memory
    quasi-Newton combination of past flow directions (inner product given by
    the tangent metric), with the same retraction and acceptance rule. It is
    much faster for stiff problems (strong coupling, large ``D``). The
    history is dropped whenever a quasi-Newton step had to be cut below
    ``1e-3``, and the next step follows the bare flow again.

    Without ``initial`` the search starts from a seeded random state, real
    when ``real`` is set. The flow keeps real states real, so the result is
    then exactly time-reversal symmetric (as the true ground state is), which
    makes its excitation spectrum pair ``+w`` with ``-w`` at equal ``k``.

    ``callback(tau, state, energy)`` is called after every accepted step with
    the accumulated step length ``tau``.

    A random start can end on a stationary point that is not the minimum
    (for instance two decoupled copies of the ``D=1`` state, with commuting
    ``Q`` and ``R``). When energy and flow norm stay frozen above ``tol`` for
    50 steps, or no step along the bare flow is admissible, the search
    restarts from seed ``seed + 1`` (up to five times) and the returned
    energy record starts over.

    Returns
    -------
    (UniformCMPS, list of float)
        Converged state and the energy after every accepted step (the first
        entry is the initial energy).

    Raises
    ------
    NoConvergence
        After ``max_steps`` steps; ``partial`` holds ``(state, energies)``.
    """
    if D < 1:
        raise ValueError("bond dimension must be at least 1")
    if initial is None:
        state = random_uniform_state(D, seed=seed, scale=_initial_scale(params), real=real)
    else:
        state = initial
        if not state.is_left_canonical():
            from .cmps import left_canonicalize
            state = left_canonicalize(state)[0]
    dens = fixed_point_density(state, canonical=True)
    E = uniform_energy(state, params, dens)
    energies = [E]
    if math.isinf(tol):
        return state, energies
    if method not in ("flow", "lbfgs"):
        raise ValueError(f"unknown method {method!r}")

    def evaluate(st):
        d = fixed_point_density(st, canonical=True)
        e = uniform_energy(st, params, d)
        _, rd = qgpe_rhs_uniform(st, d, params, "imaginary", regularization)
        return d, e, rd

    Rd = qgpe_rhs_uniform(state, dens, params, "imaginary", regularization)[1]
    gnorm = _flow_norm(Rd, dens)
    history = []  # (step, change of flow direction) pairs
    step_len = dtau
    tau = 0.0
    stalled, stall_norm, restarts = 0, gnorm, 0
    for step in range(max_steps):
        if stalled >= _STALL_STEPS:
            # energy and flow norm frozen above tol: a stationary point that is not the
            # minimum (typically non-injective, e.g. commuting Q and R)
            if initial is not None or restarts >= _MAX_RESTARTS:
                raise NoConvergence(f"stalled with |grad| = {gnorm:.3e}", partial=(state, energies))
            restarts += 1
            log.info("stalled at E = %.12g; restarting from seed %d", E, seed + restarts)
            state = random_uniform_state(D, seed=seed + restarts, scale=_initial_scale(params), real=real)
            dens = fixed_point_density(state, canonical=True)
            E = uniform_energy(state, params, dens)
            energies = [E]
            Rd = qgpe_rhs_uniform(state, dens, params, "imaginary", regularization)[1]
            gnorm = _flow_norm(Rd, dens)
            history.clear()
            step_len, stalled, stall_norm = dtau, 0, gnorm
        if gnorm < tol:
            log.info("converged after %d steps, |grad| = %.3e", step, gnorm)
            return state, energies
        metric = lambda a, b: np.trace(dag(a) @ b @ dens.rhoR).real
        direction = Rd
        quasi = method == "lbfgs" and bool(history)
        if quasi:
            direction = _lbfgs_direction(Rd, history, metric)
            if metric(direction, Rd) <= 0:
                history.clear()
                direction, step_len, quasi = Rd, dtau, False
        # first-order energy change per unit step along the direction (negative)
        slope = -2 * metric(direction, Rd)
        while True:
            R1 = state.R + step_len * direction
            Q1 = _retract(state.Q - step_len * dag(state.R) @ direction, R1)
            accept = False
            try:
                trial = UniformCMPS(Q1, R1)
                d1, E1, Rd1 = evaluate(trial)
            except (QGPEError, np.linalg.LinAlgError, ValueError):
                E1 = math.inf
            if math.isfinite(E1) and E1 <= E + 1e-12 * abs(E):
                # Armijo decrease, or inside the round-off band of E a smaller flow norm
                g1 = _flow_norm(Rd1, d1)
                accept = E1 <= E + 1e-4 * step_len * slope or g1 < gnorm
            if accept:
                taken = step_len
                if method == "lbfgs":
                    s_, y_ = step_len * direction, Rd - Rd1
                    sy = metric(s_, y_)
                    # keep only pairs with positive curvature (the update stays positive definite)
                    if quasi and taken < _LBFGS_MIN_STEP:
                        # heavy backtracking: the curvature pairs no longer describe
                        # the landscape, and keeping them only produces tiny steps
                        history.clear()
                    elif sy > 1e-12 * math.sqrt(metric(s_, s_) * metric(y_, y_)):
                        history.append((s_, y_))
                        del history[:-memory]
                    step_len = 1.0 if history else dtau
                else:
                    step_len = min(step_len * 1.2, dtau_max)
                tau += taken
                if abs(E1 - E) <= 1e-14 * abs(E) and g1 > 0.5 * stall_norm:
                    stalled += 1
                else:
                    stalled, stall_norm = 0, g1
                state, dens, E, Rd, gnorm = trial, d1, E1, Rd1, g1
                energies.append(E)
                if callback is not None:
                    callback(tau, state, E)
                break
            step_len *= 0.5
            if step_len < 1e-16:
                if method == "lbfgs" and history:
                    history.clear()
                    direction, step_len, quasi = Rd, dtau, False
                    slope = -2 * metric(direction, Rd)
                    continue
                if initial is None and restarts < _MAX_RESTARTS:
                    # no step along the bare flow is admissible: same trap as a stall
                    stalled = _STALL_STEPS
                    break
                raise NoConvergence(f"step size underflow with |grad| = {gnorm:.3e}",
                                    partial=(state, energies))
    raise NoConvergence(f"no convergence in {max_steps} steps", partial=(state, energies))


def imaginary_time_finite(state: FiniteCMPS, params: LiebLinigerParams, dtau: float,
                          tol: float = 1e-6, max_steps: int = 20000, callback: Optional[Callable] = None):
    """Imaginary-time relaxation of a finite state by forward Euler steps.

    Steps are accepted when the total energy does not increase (within
    ``1e-12 |E|``); ``v1`` is renormalised after each step so that the norm
    stays one. Stops when the relative energy change per unit ``tau`` over a
    full-size step falls below ``tol``. ``callback(tau, state, energy)`` follows every accepted step.

    Returns
    -------
    (FiniteCMPS, list of float)
    """
    state = _normalise_finite(state)
    E = finite_energy(state, params)
    energies = [E]
    dt = dtau
    tau = 0.0
    for _ in range(max_steps):
        dens = propagate_density(state)
        Qd, Rd, v1d, v2d = qgpe_rhs_finite(state, dens, params, "imaginary")
        while True:
            trial = state.with_arrays(Qs=state.Qs + dt * Qd, Rs=state.Rs + dt * Rd,
                                      v1=state.v1 + dt * v1d, v2=state.v2 + dt * v2d)
            try:
                trial = _normalise_finite(trial)
                E1 = finite_energy(trial, params)
            except (NonFiniteDerivative, ValueError, np.linalg.LinAlgError):
                E1 = math.inf
            if math.isfinite(E1) and E1 <= E + 1e-12 * abs(E):
                break
            dt *= 0.5
            if dt < 1e-14 * dtau:
                raise NoConvergence("finite imaginary-time step size underflow", partial=(state, energies))
        rate = (E - E1) / dt
        state, E = trial, E1
        tau += dt
        energies.append(E)
        if callback is not None:
            callback(tau, state, E)
        # only a full-size step can signal convergence; a cut step may just be stuck
        if dt >= dtau and rate < tol * max(abs(E), 1.0):
            return state, energies
        dt = min(dt * 1.2, dtau)
    raise NoConvergence(f"no convergence in {max_steps} steps", partial=(state, energies))


def _normalise_finite(state: FiniteCMPS) -> FiniteCMPS:
    dens = propagate_density(state)
    norm = float(np.mean(dens.norm))
    if not (norm > 0 and math.isfinite(norm)):
        raise NonFiniteDerivative("finite state norm is not positive")
    return state.with_arrays(v1=state.v1 / math.sqrt(norm))


@dataclass
class Trajectory:
    """Time series produced by :func:`real_time_evolve`."""

    times: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    densities: list = field(default_factory=list)
    states: list = field(default_factory=list)

    @property
    def final(self):
        return self.states[-1]

    def energy_drift(self) -> float:
        e = np.asarray(self.energies)
        return float(np.max(np.abs(e - e[0])) / max(abs(e[0]), 1e-300))


def _observables(state, params):
    if isinstance(state, UniformCMPS):
        dens = fixed_point_density(state)
        return uniform_energy(state, params, dens), float(particle_density(state, dens))
    dens = propagate_density(state)
    return finite_energy(state, params, dens), float(np.trapezoid(particle_density(state, dens), state.grid))


def real_time_evolve(state, params: LiebLinigerParams, t_end: float, dt: float,
                     keep_states: bool = False) -> Trajectory:
    """RK4 integration of the real-time flow up to ``t_end``.

    Uniform states are projected back onto the left-canonical constraint
    after every step. Records the energy (density for uniform states) and the particle density
    (particle number for finite states) after every step. The last state is
    always kept in ``Trajectory.states``; all of them with ``keep_states``.

    Raises
    ------
    StepTooLarge
        If the energy changes by more than ``1e-3`` relative in a single step,
        or a step produces a singular density matrix.
    """
    if not dt > 0 or not t_end >= 0:
        raise ValueError("dt must be positive and t_end non-negative")
    uniform = isinstance(state, UniformCMPS)
    if uniform:
        def f(t, y):
            s = UniformCMPS(*y)
            return qgpe_rhs_uniform(s, None, params, "real")
        y = (state.Q, state.R)

        def rebuild(y):
            # RK4 preserves the quadratic gauge constraint only to O(h^5); project back
            return UniformCMPS(_retract(y[0], y[1]), y[1])
    else:
        base = state

        def f(t, y):
            s = base.with_arrays(*y)
            return qgpe_rhs_finite(s, None, params, "real")
        y = (state.Qs, state.Rs, state.v1, state.v2)
        rebuild = lambda y: base.with_arrays(*y)

    traj = Trajectory()
    E, n = _observables(state, params)
    traj.times.append(0.0)
    traj.energies.append(E)
    traj.densities.append(n)
    traj.states.append(state)
    nsteps = max(1, int(round(t_end / dt))) if t_end > 0 else 0
    h = t_end / nsteps if nsteps else dt
    t = 0.0
    for _ in range(nsteps):
        try:
            y = ode_step_rk4(f, y, t, h)
            cur = rebuild(y)
        except (SingularDensity, NonInjective) as exc:
            # an intermediate stage left the manifold of well-conditioned states
            raise StepTooLarge(f"step at t={t:.4g} degenerated the state: {exc}", partial=traj) from exc
        t += h
        if uniform:
            y = (cur.Q, cur.R)
        E1, n1 = _observables(cur, params)
        if abs(E1 - E) > 1e-3 * max(abs(E), 1e-12):
            raise StepTooLarge(f"energy jumped from {E:.6g} to {E1:.6g} at t={t:.4g}", partial=traj)
        E = E1
        traj.times.append(t)
        traj.energies.append(E1)
        traj.densities.append(n1)
        if keep_states:
            traj.states.append(cur)
        else:
            traj.states[-1] = cur
    return traj


# -- calibration against the exact solution ------------------------------------

def chemical_potential_for_gamma(gamma: float, density: float = 1.0) -> float:
    """Exact chemical potential ``mu = rho^2 (3 e - gamma e'(gamma))`` at coupling ``gamma``."""
    from .oracle import bethe_energy_function

    h = 1e-4 * max(gamma, 1e-3)
    e = bethe_energy_function(gamma)
    de = (bethe_energy_function(gamma + h) - bethe_energy_function(gamma - h)) / (2 * h)
    return density**2 * (3 * e - gamma * de)


def ground_state_at_gamma(gamma: float, D: int, tol: float = 1e-8, max_steps: int = 200000,
                          seed: int = 0, refine: int = 0, initial=None, method: str = "lbfgs"):
    """Variational ground state at target coupling ``gamma = g / n``.

    Uses ``g = gamma`` (unit target density) and ``mu`` from the exact
    equation of state; ``refine`` secant updates of ``mu`` then move the
    measured density onto ``g / gamma``.

    Returns
    -------
    dict with keys ``state``, ``params``, ``energies``, ``density``, ``gamma``.
    """
    g = float(gamma)
    mu = chemical_potential_for_gamma(gamma)
    history = []
    state = initial
    for it in range(refine + 1):
        params = LiebLinigerParams(g, mu)
        state, energies = imaginary_time_ground_state(params, D, tol=tol, max_steps=max_steps,
                                                      seed=seed, initial=state, method=method)
        n = float(particle_density(state, fixed_point_density(state)))
        history.append((mu, n))
        if it == refine:
            break
        target = 1.0
        if len(history) >= 2 and history[-1][1] != history[-2][1]:
            (m0, n0), (m1, n1) = history[-2], history[-1]
            mu = m1 + (target - n1) * (m1 - m0) / (n1 - n0)
        else:
            # dn/dmu ~ 1 / (2 g) in the weakly interacting regime; capped for strong coupling
            mu = mu + (target - n) * min(2 * g, 2 * math.pi**2)
    return {"state": state, "params": params, "energies": energies, "density": n, "gamma": g / n}
