"""Uniform and finite continuous matrix product states.

A uniform state is the pair ``(Q, R)`` of ``D x D`` matrices; a finite state
samples ``Q(x), R(x)`` on a uniform grid and carries the boundary vectors
``v1`` (left, entering as ``v1^dagger``) and ``v2`` (right).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .errors import SingularGauge
from .numerics import comm, dag

__all__ = [
    "UniformCMPS",
    "FiniteCMPS",
    "BoundaryCondition",
    "GaugeTransform",
    "gauge_transform",
    "left_canonicalize",
    "random_uniform_state",
    "covariant_derivative_x",
    "canonical_residual",
    "ddx",
    "d2dx2",
    "checkpoint_dumps",
    "checkpoint_loads",
    "save_checkpoint",
    "load_checkpoint",
]

CANONICAL_TOL = 1e-10


def _as_matrix(a, name):
    a = np.array(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


@dataclass(frozen=True, eq=False)
class UniformCMPS:
    """Translation-invariant cMPS.

    Parameters
    ----------
    Q, R : ndarray of shape (D, D)
        ``Q`` has units of inverse length, ``R`` of inverse square-root length.
    """

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = _as_matrix(self.Q, "Q")
        R = _as_matrix(self.R, "R")
        if Q.shape != R.shape:
            raise ValueError("Q and R must have equal shape")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @property
    def D(self) -> int:
        return self.Q.shape[0]

    def canonical_residual(self) -> float:
        return canonical_residual(self.Q, self.R)

    def is_left_canonical(self, tol=CANONICAL_TOL) -> bool:
        return self.canonical_residual() < tol

    def __repr__(self):
        return f"UniformCMPS(D={self.D}, canonical_residual={self.canonical_residual():.2e})"


@dataclass(frozen=True)
class BoundaryCondition:
    """Dirichlet ``psi(x1) = a, psi(x2) = b`` or homogeneous Neumann."""

    kind: str = "neumann"
    a: complex = 0.0
    b: complex = 0.0

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown boundary condition kind {self.kind!r}")
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("Dirichlet amplitudes must be finite")

    @classmethod
    def dirichlet(cls, a=0.0, b=0.0):
        return cls("dirichlet", complex(a), complex(b))

    @classmethod
    def neumann(cls):
        return cls("neumann")

    @property
    def is_dirichlet(self):
        return self.kind == "dirichlet"


@dataclass(frozen=True, eq=False)
class FiniteCMPS:
    """cMPS on ``[x1, x2]`` sampled at ``N`` equally spaced points.

    Under Dirichlet conditions the end rows of ``Rs`` must equal ``a*I`` and
    ``b*I`` exactly; :meth:`from_profiles` imposes them.
    """

    grid: np.ndarray
    Qs: np.ndarray
    Rs: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    bc: BoundaryCondition = field(default_factory=BoundaryCondition)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        Qs = np.array(self.Qs, dtype=complex)
        Rs = np.array(self.Rs, dtype=complex)
        v1 = np.array(self.v1, dtype=complex).ravel()
        v2 = np.array(self.v2, dtype=complex).ravel()
        N = grid.size
        if N < 3:
            raise ValueError("a finite cMPS needs at least 3 grid points")
        steps = np.diff(grid)
        if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * steps.mean():
            raise ValueError("grid must be increasing with uniform spacing")
        if Qs.ndim != 3 or Qs.shape[0] != N or Qs.shape[1] != Qs.shape[2]:
            raise ValueError(f"Qs must have shape (N, D, D), got {Qs.shape}")
        if Rs.shape != Qs.shape:
            raise ValueError("Rs and Qs must have equal shape")
        D = Qs.shape[1]
        if v1.size != D or v2.size != D:
            raise ValueError("boundary vectors must have length D")
        if np.linalg.norm(v1) == 0 or np.linalg.norm(v2) == 0:
            raise ValueError("boundary vectors must be nonzero")
        for name, a in (("Qs", Qs), ("Rs", Rs), ("v1", v1), ("v2", v2)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} has non-finite entries")
        if self.bc.is_dirichlet:
            eye = np.eye(D)
            if not (np.array_equal(Rs[0], self.bc.a * eye) and np.array_equal(Rs[-1], self.bc.b * eye)):
                raise ValueError("Dirichlet conditions require R(x1) = a*I and R(x2) = b*I")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "Qs", Qs)
        object.__setattr__(self, "Rs", Rs)
        object.__setattr__(self, "v1", v1)
        object.__setattr__(self, "v2", v2)

    @classmethod
    def from_profiles(cls, grid, Qs, Rs, v1, v2, bc=None):
        """Build a state, overwriting the end rows of ``Rs`` under Dirichlet."""
        bc = bc or BoundaryCondition.neumann()
        Rs = np.array(Rs, dtype=complex)
        if bc.is_dirichlet:
            D = Rs.shape[1]
            Rs[0] = bc.a * np.eye(D)
            Rs[-1] = bc.b * np.eye(D)
        return cls(grid, Qs, Rs, v1, v2, bc)

    @classmethod
    def from_uniform(cls, state: UniformCMPS, grid, v1=None, v2=None, bc=None):
        N = len(grid)
        D = state.D
        v1 = np.ones(D) if v1 is None else v1
        v2 = np.ones(D) if v2 is None else v2
        Qs = np.broadcast_to(state.Q, (N, D, D))
        Rs = np.broadcast_to(state.R, (N, D, D))
        return cls.from_profiles(grid, Qs, Rs, v1, v2, bc)

    @property
    def D(self) -> int:
        return self.Qs.shape[1]

    @property
    def N(self) -> int:
        return self.grid.size

    @property
    def dx(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def with_arrays(self, Qs=None, Rs=None, v1=None, v2=None) -> "FiniteCMPS":
        return replace(
            self,
            Qs=self.Qs if Qs is None else Qs,
            Rs=self.Rs if Rs is None else Rs,
            v1=self.v1 if v1 is None else v1,
            v2=self.v2 if v2 is None else v2,
        )


State = Union[UniformCMPS, FiniteCMPS]


@dataclass(frozen=True, eq=False)
class GaugeTransform:
    """Invertible ``G`` (uniform) or ``G(x)`` sampled on the grid, shape (N, D, D)."""

    G: np.ndarray

    def __post_init__(self):
        G = np.array(self.G, dtype=complex)
        if G.ndim not in (2, 3) or G.shape[-1] != G.shape[-2]:
            raise ValueError(f"G must have shape (D, D) or (N, D, D), got {G.shape}")
        if not np.all(np.isfinite(G)):
            raise SingularGauge("gauge matrix has non-finite entries")
        cond = np.linalg.cond(G)
        if np.any(~np.isfinite(cond)) or np.max(cond) > 1e12:
            raise SingularGauge(f"gauge matrix condition number {np.max(cond):.3e} exceeds 1e12")
        object.__setattr__(self, "G", G)

    @property
    def uniform(self) -> bool:
        return self.G.ndim == 2


def canonical_residual(Q, R) -> float:
    """Frobenius norm of ``Q + Q^dagger + R^dagger R`` (max over grid points)."""
    res = Q + dag(Q) + dag(R) @ R
    return float(np.max(np.linalg.norm(res, axis=(-2, -1))))


def ddx(F, dx):
    """Second-order derivative along axis 0: centred inside, one-sided at the ends."""
    F = np.asarray(F)
    out = np.empty_like(F)
    out[1:-1] = (F[2:] - F[:-2]) / (2 * dx)
    out[0] = (-3 * F[0] + 4 * F[1] - F[2]) / (2 * dx)
    out[-1] = (3 * F[-1] - 4 * F[-2] + F[-3]) / (2 * dx)
    return out


def d2dx2(F, dx):
    """Second derivative along axis 0; second-order one-sided at the ends when N >= 4."""
    F = np.asarray(F)
    out = np.empty_like(F)
    out[1:-1] = (F[2:] - 2 * F[1:-1] + F[:-2]) / dx**2
    if F.shape[0] >= 4:
        out[0] = (2 * F[0] - 5 * F[1] + 4 * F[2] - F[3]) / dx**2
        out[-1] = (2 * F[-1] - 5 * F[-2] + 4 * F[-3] - F[-4]) / dx**2
    else:
        out[0] = out[1]
        out[-1] = out[-2]
    return out


def covariant_derivative_x(state: State) -> np.ndarray:
    """``D_x R = dR/dx + [Q, R]``; a single matrix for uniform states."""
    if isinstance(state, UniformCMPS):
        return comm(state.Q, state.R)
    return ddx(state.Rs, state.dx) + comm(state.Qs, state.Rs)


def gauge_transform(state: State, G: GaugeTransform) -> State:
    """Apply ``R -> G^-1 R G``, ``Q -> G^-1 (Q + d/dx) G``.

    Boundary vectors transform as ``v1^dagger -> v1^dagger G(x1)`` and
    ``v2 -> G(x2)^-1 v2``. A uniform ``G`` may be applied to a finite state.
    """
    if not isinstance(G, GaugeTransform):
        G = GaugeTransform(G)
    Gm = G.G
    try:
        if isinstance(state, UniformCMPS):
            if not G.uniform:
                raise ValueError("x-dependent gauge cannot act on a uniform state")
            if Gm.shape[0] != state.D:
                raise ValueError("gauge dimension mismatch")
            Q = np.linalg.solve(Gm, state.Q @ Gm)
            R = np.linalg.solve(Gm, state.R @ Gm)
            return UniformCMPS(Q, R)

        N, D = state.N, state.D
        if G.uniform:
            Gm = np.broadcast_to(Gm, (N, D, D))
            dG = np.zeros_like(Gm)
        else:
            dG = ddx(Gm, state.dx)
        if Gm.shape != (N, D, D):
            raise ValueError("gauge dimension mismatch")
        Qs = np.linalg.solve(Gm, state.Qs @ Gm + dG)
        Rs = np.linalg.solve(Gm, state.Rs @ Gm)
        if state.bc.is_dirichlet:
            # G^-1 (a I) G = a I; keep it exact
            Rs[0] = state.bc.a * np.eye(D)
            Rs[-1] = state.bc.b * np.eye(D)
        v1 = dag(Gm[0]) @ state.v1
        v2 = np.linalg.solve(Gm[-1], state.v2)
    except np.linalg.LinAlgError as exc:
        raise SingularGauge(str(exc)) from exc
    return state.with_arrays(Qs=Qs, Rs=Rs, v1=v1, v2=v2)


def left_canonicalize(state: UniformCMPS):
    """Bring a uniform state to left-canonical form.

    The dominant eigenvalue of the left transfer generator is shifted to zero
    through ``Q -> Q - lambda/2``, its eigenvector ``rho_L`` is Cholesky
    factored as ``L^dagger L`` and ``G = L^-1`` is applied.

    Returns
    -------
    (UniformCMPS, GaugeTransform)
        Canonical state and the gauge mapping the shifted input onto it.
    """
    from .errors import DegenerateFixedPoint
    from .transfer import dominant_left_fixed_point

    lam, rhoL = dominant_left_fixed_point(state.Q, state.R)
    D = state.D
    Q = state.Q - 0.5 * lam * np.eye(D)
    rhoL = 0.5 * (rhoL + dag(rhoL))
    rhoL = rhoL * (D / np.trace(rhoL).real)
    w = np.linalg.eigvalsh(rhoL)
    if w[0] <= 0 or w[-1] / w[0] > 1e12:
        raise DegenerateFixedPoint(f"left fixed point not positive definite (eigenvalues {w[0]:.3e}..{w[-1]:.3e})")
    # rho_L = L^dagger L with L upper triangular
    L = dag(np.linalg.cholesky(rhoL))
    G = GaugeTransform(np.linalg.inv(L))
    out = gauge_transform(UniformCMPS(Q, state.R), G)
    # exact projection onto the canonical constraint; the gauge leaves an O(eps) residual
    Qc = out.Q
    herm = -0.5 * dag(out.R) @ out.R
    Qc = 0.5 * (Qc - dag(Qc)) + herm
    return UniformCMPS(Qc, out.R), G


def random_uniform_state(D: int, seed: int = 0, scale: float = 1.0, real: bool = False) -> UniformCMPS:
    """Random left-canonical state ``Q = -R^dagger R / 2 + H`` (``H`` antihermitian).

    ``R`` has i.i.d. complex Gaussian entries of variance ``scale**2 / D``.
    With ``real=True`` all entries are real, giving a time-reversal
    symmetric state (``H`` is then antisymmetric).
    """
    if D < 1:
        raise ValueError("bond dimension must be at least 1")
    rng = np.random.default_rng(seed)
    if real:
        R = scale * rng.standard_normal((D, D)) / np.sqrt(D)
        X = rng.standard_normal((D, D)) / np.sqrt(D)
    else:
        R = scale * (rng.standard_normal((D, D)) + 1j * rng.standard_normal((D, D))) / np.sqrt(2 * D)
        X = (rng.standard_normal((D, D)) + 1j * rng.standard_normal((D, D))) / np.sqrt(2 * D)
    H = 0.5 * (X - dag(X))
    Q = -0.5 * dag(R) @ R + H
    return UniformCMPS(Q, R)


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_FORMAT = "qgpe-cmps-v1"


def _fmt(x: float) -> str:
    return "%.17g" % x


def _emit(obj) -> str:
    """JSON text with sorted keys and floats printed to 17 significant digits."""
    if isinstance(obj, dict):
        return "{" + ", ".join(f'"{k}": {_emit(obj[k])}' for k in sorted(obj)) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_emit(v) for v in obj) + "]"
    if isinstance(obj, str):
        return '"' + obj + '"'
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    return _fmt(float(obj))


def _complex_nested(a):
    a = np.asarray(a, dtype=complex)
    if a.ndim == 0:
        return [float(a.real), float(a.imag)]
    return [_complex_nested(x) for x in a]


def _from_nested(data, shape):
    arr = np.asarray(data, dtype=float)
    if arr.shape != tuple(shape) + (2,):
        raise ValueError(f"checkpoint array has shape {arr.shape[:-1]}, expected {tuple(shape)}")
    return arr[..., 0] + 1j * arr[..., 1]


def checkpoint_dumps(state: State) -> str:
    """Serialise a state to the ``qgpe-cmps-v1`` JSON text (LF-terminated)."""
    if isinstance(state, UniformCMPS):
        doc = {"format": CHECKPOINT_FORMAT, "kind": "uniform", "D": state.D,
               "Q": _complex_nested(state.Q), "R": _complex_nested(state.R)}
    elif isinstance(state, FiniteCMPS):
        doc = {"format": CHECKPOINT_FORMAT, "kind": "finite", "D": state.D,
               "Q": _complex_nested(state.Qs), "R": _complex_nested(state.Rs),
               "grid": [float(x) for x in state.grid],
               "v1": _complex_nested(state.v1), "v2": _complex_nested(state.v2),
               "bc": {"kind": state.bc.kind, "a": _complex_nested(state.bc.a),
                      "b": _complex_nested(state.bc.b)}}
    else:
        raise TypeError(f"cannot serialise {type(state).__name__}")
    return _emit(doc) + "\n"


def checkpoint_loads(text: str) -> State:
    """Inverse of :func:`checkpoint_dumps`; raises ``ValueError`` on malformed input."""
    import json

    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint")
    D = doc.get("D")
    if not isinstance(D, int) or D < 1:
        raise ValueError("checkpoint field D must be a positive integer")
    kind = doc.get("kind")
    if kind == "uniform":
        return UniformCMPS(_from_nested(doc["Q"], (D, D)), _from_nested(doc["R"], (D, D)))
    if kind == "finite":
        grid = np.asarray(doc["grid"], dtype=float)
        N = grid.size
        bcd = doc.get("bc", {"kind": "neumann", "a": [0.0, 0.0], "b": [0.0, 0.0]})
        a = _from_nested(bcd["a"], ())
        b = _from_nested(bcd["b"], ())
        bc = BoundaryCondition(bcd["kind"], complex(a), complex(b))
        return FiniteCMPS(grid, _from_nested(doc["Q"], (N, D, D)), _from_nested(doc["R"], (N, D, D)),
                          _from_nested(doc["v1"], (D,)), _from_nested(doc["v2"], (D,)), bc)
    raise ValueError(f"unknown checkpoint kind {kind!r}")


def save_checkpoint(path, state: State) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(checkpoint_dumps(state))


def load_checkpoint(path) -> State:
    with open(path, encoding="utf-8") as fh:
        return checkpoint_loads(fh.read())
