"""Linear response of a uniform ground state: quantum Bogoliubov-de Gennes equations.

A plane-wave perturbation ``R = R0 + eps (e^{i(kx - wt)} R_+ + e^{-i(kx - wt)} R_-)``
with ``Q = Q0 - eps R0^dag (R - R0)`` (left-canonical to first order) obeys::

    w (R_+ rho0, -rho0 R_-^dag) = (G(k; R_+, R_-^dag), G(-k; R_-, R_+^dag)^dag) + drive

where ``G`` also solves the shifted transfer equations for the induced
density-matrix and gauge-potential modulations. The unknowns are paired as
``z = (R_+, Y)`` with ``Y = R_-^dag``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .cmps import UniformCMPS
from .errors import IllConditioned, NotStationary, QGPEError, Resonance, ShiftSingular
from .numerics import LinearMap, comm, dag, solve_linear, solve_singular_linear, _gmres
from .tdvp import LiebLinigerParams, _flow_norm, qgpe_rhs_uniform, solve_F
from .transfer import (
    _kron_left,
    _kron_right,
    apply_transfer_left,
    apply_transfer_right,
    fixed_point_density,
    transfer_left_map,
    transfer_right_map,
)

log = logging.getLogger(__name__)

__all__ = [
    "GroundStateBundle",
    "ResponseProblem",
    "BdGSolution",
    "prepare_bundle",
    "linearized_action",
    "bdg_matrices",
    "solve_response",
    "density_response_amplitude",
    "excitation_spectrum",
    "density_mode_weights",
    "sweep_k",
]

DENSE_AUX_MAX_D = 32


@dataclass(frozen=True, eq=False)
class GroundStateBundle:
    """Stationary uniform state with its fixed point and gauge potential."""

    state: UniformCMPS
    params: LiebLinigerParams
    rhoR0: np.ndarray
    F0: np.ndarray
    P0: np.ndarray
    residual: float

    @property
    def D(self):
        return self.state.D

    @property
    def density(self) -> float:
        R = self.state.R
        return float(np.trace(R @ self.rhoR0 @ dag(R)).real)


@dataclass(frozen=True)
class ResponseProblem:
    """Drive ``amplitude * cos(k x - omega t)`` coupled to the density."""

    k: float
    omega: float = 0.0
    amplitude: float = 1.0
    params: Optional[LiebLinigerParams] = None


@dataclass(frozen=True, eq=False)
class BdGSolution:
    """Plane-wave amplitudes; ``F_- = F_+^dag`` and ``rho_- = rho_+^dag``."""

    k: float
    omega: float
    Rplus: np.ndarray
    Rminus: np.ndarray
    Fplus: np.ndarray
    rhoplus: np.ndarray
    amplitude: float
    response: float
    residual: float

    @property
    def Fminus(self):
        return dag(self.Fplus)

    @property
    def rhominus(self):
        return dag(self.rhoplus)


def prepare_bundle(state: UniformCMPS, params: LiebLinigerParams, tol: float = 1e-8) -> GroundStateBundle:
    """Fixed point, ``F0`` and ``P0 = -i R0^dag [Q0, R0] + i F0`` of a stationary state.

    Raises
    ------
    NotStationary
        If the metric norm of the imaginary-time flow exceeds ``tol``.
    """
    if not state.is_left_canonical():
        raise NotStationary("state is not left-canonical")
    dens = fixed_point_density(state, canonical=True)
    _, Rd = qgpe_rhs_uniform(state, dens, params, "imaginary")
    res = _flow_norm(Rd, dens)
    if res > tol:
        raise NotStationary(f"stationarity residual {res:.3e} exceeds {tol:.1e}")
    F0 = solve_F(state, dens, params)
    K0 = comm(state.Q, state.R)
    P0 = -1j * dag(state.R) @ K0 + 1j * F0
    return GroundStateBundle(state, params, dens.rhoR, F0, P0, res)


class _AuxSolvers:
    """Solvers for ``(ik + T_R) rho = b`` and ``(ik - T_L) F = b`` at fixed ``k``."""

    def __init__(self, bundle: GroundStateBundle, k: float):
        Q, R = bundle.state.Q, bundle.state.R
        D = bundle.D
        self.k = k
        self.D = D
        self.zero = k == 0.0
        eye = np.eye(D, dtype=complex)
        if self.zero:
            self._rho = lambda b: solve_singular_linear(transfer_right_map(Q, R), b, eye, bundle.rhoR0)
            self._F = lambda b: -solve_singular_linear(transfer_left_map(Q, R), b, bundle.rhoR0, eye)
            return
        n = D * D
        if abs(k) < 1e-12:
            raise ShiftSingular(f"k={k} too close to the fixed-point kernel")
        if D <= DENSE_AUX_MAX_D:
            luR = sla.lu_factor(1j * k * np.eye(n) + _kron_right(Q, R))
            luL = sla.lu_factor(1j * k * np.eye(n) - _kron_left(Q, R))
            self._rho = lambda b: sla.lu_solve(luR, b.ravel()).reshape(D, D)
            self._F = lambda b: sla.lu_solve(luL, b.ravel()).reshape(D, D)
        else:
            mR = LinearMap(lambda x: 1j * k * x + apply_transfer_right(Q, R, x), (D, D))
            mL = LinearMap(lambda x: 1j * k * x - apply_transfer_left(Q, R, x), (D, D))
            self._rho = lambda b: solve_linear(mR, b, method="krylov")
            self._F = lambda b: solve_linear(mL, b, method="krylov")

    def rho(self, b):
        return self._rho(b)

    def F(self, b):
        return self._F(b)


def _plus_component(bundle: GroundStateBundle, k: float, X, Y, drive, aux: _AuxSolvers):
    """Coefficient of ``e^{ikx}`` on the right side of the linearised flow.

    ``X`` is the ``e^{ikx}`` amplitude of the R-perturbation and ``Y`` the
    ``e^{ikx}`` amplitude of its adjoint. Returns ``(G, rho_+, F_+)``.
    """
    Q0, R0 = bundle.state.Q, bundle.state.R
    rho0, F0 = bundle.rhoR0, bundle.F0
    g, v0 = bundle.params.g, bundle.params.v0
    R0d = dag(R0)
    ik = 1j * k
    K0 = comm(Q0, R0)
    Qt = -R0d @ X
    Qtd = -Y @ R0

    S = Qt @ rho0 + rho0 @ Qtd + X @ rho0 @ R0d + R0 @ rho0 @ Y
    rp = aux.rho(-S)

    Kt = comm(Qt, R0) + comm(Q0, X) + ik * X
    Ktd = comm(R0d, Qtd) + comm(Y, dag(Q0)) + ik * Y
    R0sq = R0 @ R0
    R0dsq = R0d @ R0d
    sF = (F0 @ Qt + Qtd @ F0 + Y @ F0 @ R0 + R0d @ F0 @ X + dag(K0) @ Kt + Ktd @ K0
          + g * (Y @ R0d @ R0sq + R0d @ Y @ R0sq + R0dsq @ X @ R0 + R0dsq @ R0 @ X)
          + v0 * (Y @ R0 + R0d @ X) + drive * (R0d @ R0))
    Fp = aux.F(sF)

    KR = comm(K0, R0)
    G = (-(ik**2) * X @ rho0 - 2 * comm(Q0, ik * X) @ rho0 - comm(ik * Qt, R0) @ rho0
         - comm(Qt, K0) @ rho0 - comm(Q0, comm(Qt, R0)) @ rho0 - comm(Q0, comm(Q0, X)) @ rho0
         - comm(Q0, K0) @ rp
         + g * ((Y @ R0sq + R0d @ X @ R0 + R0d @ R0 @ X) @ rho0 + R0d @ R0sq @ rp
                + X @ R0 @ rho0 @ R0d + R0 @ X @ rho0 @ R0d + R0sq @ rp @ R0d + R0sq @ rho0 @ Y)
         + v0 * X @ rho0 + v0 * R0 @ rp + drive * R0 @ rho0
         + comm(Kt, R0) @ rho0 @ R0d + comm(K0, X) @ rho0 @ R0d + KR @ rp @ R0d + KR @ rho0 @ Y
         + comm(X, R0d) @ K0 @ rho0 + comm(R0, Y) @ K0 @ rho0 + comm(R0, R0d) @ Kt @ rho0
         + comm(R0, R0d) @ K0 @ rp
         + comm(Fp, R0) @ rho0 + comm(F0, X) @ rho0 + comm(F0, R0) @ rp)
    return G, rp, Fp


class _PairAction:
    """``z = (R_+, Y) -> (G(k; R_+, Y), G(-k; Y^dag, R_+^dag)^dag)`` with given drive."""

    def __init__(self, bundle, k):
        self.bundle = bundle
        self.k = k
        self.aux_p = _AuxSolvers(bundle, k)
        self.aux_m = self.aux_p if k == 0 else _AuxSolvers(bundle, -k)

    def __call__(self, z, drive=0.0, details=False):
        X, Y = z[0], z[1]
        top, rp, Fp = _plus_component(self.bundle, self.k, X, Y, drive, self.aux_p)
        bot, _, _ = _plus_component(self.bundle, -self.k, dag(Y), dag(X), drive, self.aux_m)
        out = np.stack([top, dag(bot)])
        if details:
            return out, rp, Fp
        return out


def linearized_action(bundle: GroundStateBundle, k: float, sign: int = 1) -> LinearMap:
    """Hessian block at momentum ``sign * k`` acting on stacked ``(R_+, R_-^dag)``.

    The returned map sends ``z`` of shape ``(2, D, D)`` to the undriven right
    side of the linearised flow. It is Hermitian in the Frobenius pairing.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    act = _PairAction(bundle, sign * float(k))
    D = bundle.D
    return LinearMap(lambda z: act(z), (2, D, D), lambda z: act(z))


def _metric_map(bundle):
    rho0 = bundle.rhoR0
    D = bundle.D
    return LinearMap(lambda z: np.stack([z[0] @ rho0, -rho0 @ z[1]]), (2, D, D))


def bdg_matrices(bundle: GroundStateBundle, k: float):
    """Dense Hessian ``H`` and metric ``S`` (``H z = w S z``) in row-major coordinates."""
    H = linearized_action(bundle, k).matrix()
    S = _metric_map(bundle).matrix()
    return H, S


def _drive_vector(act: _PairAction, amplitude):
    """Inhomogeneous term for ``amplitude * cos(kx - wt)``: half the amplitude per exponential.

    The drive enters both directly and through the gauge-potential modulation,
    so it is taken as the affine part of the linearised flow.
    """
    D = act.bundle.D
    return act(np.zeros((2, D, D), dtype=complex), drive=0.5 * amplitude)


DENSE_RESPONSE_MAX = 2048
RESONANCE_RCOND = 1e-14


def solve_response(problem: ResponseProblem, bundle: GroundStateBundle, tol: float = 1e-10,
                   method: str = "auto") -> BdGSolution:
    """Driven plane-wave response at ``(k, omega)``.

    Solves ``(omega S - H) z = drive``. ``method="dense"`` assembles ``H`` and
    uses an LU solve; ``"gmres"`` is matrix-free. ``"auto"`` picks dense up to
    2048 unknowns, where the Hessian's condition number (it inherits that of
    the Schmidt spectrum) makes restarted GMRES slow.

    Raises
    ------
    Resonance
        If the solve cannot reach a relative residual of ``1e-8``.
    """
    k, omega, amp = float(problem.k), float(problem.omega), float(problem.amplitude)
    D = bundle.D
    act = _PairAction(bundle, k)
    metric = _metric_map(bundle)
    b = _drive_vector(act, amp)
    shape = (2, D, D)
    n = 2 * D * D
    if method == "auto":
        method = "dense" if n <= DENSE_RESPONSE_MAX else "gmres"
    if method not in ("dense", "gmres"):
        raise ValueError(f"unknown method {method!r}")
    op = lambda v: (omega * metric(v.reshape(shape)) - act(v.reshape(shape))).ravel()
    if amp == 0.0:
        z = np.zeros(shape, dtype=complex)
    elif method == "dense":
        M = np.column_stack([op(e) for e in np.eye(n, dtype=complex)])
        getrf, getrs, gecon = sla.get_lapack_funcs(("getrf", "getrs", "gecon"), (M,))
        lu, piv, info = getrf(M)
        rcond = gecon(lu, np.linalg.norm(M, 1), norm="1")[0] if info == 0 else 0.0
        if not rcond > RESONANCE_RCOND:
            raise Resonance(f"singular response matrix at k={k}, omega={omega} (reciprocal condition {rcond:.2e})")
        z = getrs(lu, piv, b.ravel())[0].reshape(shape)
    else:
        x, _ = _gmres(op, b.ravel(), None, tol, 20 * n, None)
        z = x.reshape(shape)
    res_vec = omega * metric(z) - act(z) - b
    bnorm = np.linalg.norm(b)
    residual = float(np.linalg.norm(res_vec) / bnorm) if bnorm else 0.0
    if not np.isfinite(residual) or residual > 1e-8:
        raise Resonance(f"response solve stagnated at relative residual {residual:.3e} (k={k}, omega={omega})")
    # rho_+ and F_+ include the drive's own source
    _, rp, Fp = act(z, drive=0.5 * amp, details=True)
    sol = BdGSolution(k, omega, z[0], dag(z[1]), Fp, rp, amp, 0.0, residual)
    resp = density_response_amplitude(sol, bundle, k)
    return BdGSolution(k, omega, z[0], dag(z[1]), Fp, rp, amp, resp, residual)


def density_response_amplitude(solution: BdGSolution, bundle: GroundStateBundle, k: float = None) -> float:
    """Amplitude of the induced density wave per unit drive amplitude.

    ``delta n(x) = 2 |dn_+| cos(kx - wt + phase)`` with
    ``dn_+ = tr(R_+ rho0 R0^dag + R0 rho0 R_-^dag + R0 rho_+ R0^dag)``.
    """
    if solution.amplitude == 0.0:
        return 0.0
    R0, rho0 = bundle.state.R, bundle.rhoR0
    R0d = dag(R0)
    dn = np.trace(solution.Rplus @ rho0 @ R0d + R0 @ rho0 @ dag(solution.Rminus)
                  + R0 @ solution.rhoplus @ R0d)
    return float(2 * abs(dn) / abs(solution.amplitude))


def excitation_spectrum(bundle: GroundStateBundle, k: float, n_modes: Optional[int] = None,
                        return_all: bool = False):
    """Positive generalised eigenvalues of ``H z = w S z``, sorted ascending.

    ``H`` is Hermitian and, for a stable ground state at ``k != 0``, positive
    definite; with ``H = L L^dag`` the problem becomes the Hermitian
    eigenproblem of ``L^dag S^-1 L``, whose spectrum comes in exact ``+-w``
    pairs. ``return_all`` returns the full signed spectrum instead.
    """
    H, S = bdg_matrices(bundle, k)
    H = 0.5 * (H + H.conj().T)
    try:
        L = np.linalg.cholesky(H)
        Sinv_L = np.linalg.solve(S, L)
        M = L.conj().T @ Sinv_L
        w = np.linalg.eigvalsh(0.5 * (M + M.conj().T))
    except np.linalg.LinAlgError:
        log.warning("Hessian not positive definite at k=%g; using the general eigensolver", k)
        w = sla.eigvals(H, S)
        w = np.sort(w.real)
    if return_all:
        return np.sort(w)
    pos = np.sort(w[w > 0])
    return pos if n_modes is None else pos[:n_modes]


def density_mode_weights(bundle: GroundStateBundle, k: float):
    """Positive mode frequencies and their shares of the static density response.

    With ``H = L L^dag`` and ``L^dag S^-1 L u = w u`` the modes
    ``z = L^-dag u`` resolve ``H^-1 = sum z z^dag``, so ``|z^dag d|^2`` (``d``
    the drive vector) is each mode's contribution to the static response.
    Contributions of ``+w`` and ``-w`` partners are added.

    Returns
    -------
    (omega, weight) : arrays sorted by ``omega``; weights sum to one.
    """
    if k == 0:
        raise ShiftSingular("mode weights need k != 0 (the k = 0 Hessian has a phase zero mode)")
    H, S = bdg_matrices(bundle, k)
    H = 0.5 * (H + H.conj().T)
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise IllConditioned(f"Hessian not positive definite at k={k}") from exc
    M = L.conj().T @ np.linalg.solve(S, L)
    w, U = np.linalg.eigh(0.5 * (M + M.conj().T))
    Z = sla.solve_triangular(L.conj().T, U, lower=False)
    d = _drive_vector(_PairAction(bundle, k), 1.0).ravel()
    c = np.abs(Z.conj().T @ d) ** 2
    order = np.argsort(np.abs(w))
    w, c = w[order], c[order]
    # partners are adjacent after sorting by |w|
    pos = w[1::2] if w[1] > 0 else w[0::2]
    wt = c[0::2] + c[1::2]
    return np.abs(pos), wt / wt.sum()


@dataclass
class SweepRow:
    k: float
    omega: float
    response: float = float("nan")
    residual: float = float("nan")
    error: Optional[str] = None


def sweep_k(bundle: GroundStateBundle, k_values: Sequence[float], omega: float = 0.0,
            threads: int = 1) -> list:
    """Independent :func:`solve_response` per ``k``; failures are recorded per row."""

    def one(k):
        try:
            sol = solve_response(ResponseProblem(float(k), omega), bundle)
            return SweepRow(float(k), omega, sol.response, sol.residual)
        except QGPEError as exc:
            return SweepRow(float(k), omega, error=f"{type(exc).__name__}: {exc}")

    ks = list(k_values)
    if threads <= 1 or len(ks) <= 1:
        return [one(k) for k in ks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, ks))
