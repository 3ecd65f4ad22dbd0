import numpy as np
import pytest
from hypothesis import given, strategies as st

from qgpe.cmps import BoundaryCondition, FiniteCMPS, UniformCMPS, covariant_derivative_x, random_uniform_state
from qgpe.errors import GaugeFixingViolated, StepTooLarge
from qgpe.numerics import comm, dag
from qgpe.oracle import mean_field_ground_state
from qgpe.tdvp import (
    LiebLinigerParams,
    TangentVector,
    chemical_potential_for_gamma,
    choose_P,
    imaginary_time_ground_state,
    interaction_kernel,
    qgpe_rhs_finite,
    qgpe_rhs_uniform,
    real_time_evolve,
    solve_F,
    tangent_metric,
    uniform_energy,
)
from qgpe.transfer import (
    DensityMatrices,
    apply_transfer_left,
    fixed_point_density,
    particle_density,
    propagate_density,
)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def scalar_state(phi, theta=0.0):
    return UniformCMPS(np.array([[-abs(phi) ** 2 / 2 + 1j * theta]]), np.array([[phi]]))


# -- building blocks ------------------------------------------------------------------

def test_params_validation(caplog):
    with pytest.raises(ValueError):
        LiebLinigerParams(float("nan"), 1.0)
    LiebLinigerParams(-1.0, 1.0)
    assert "attractive" in caplog.text
    assert LiebLinigerParams(2.0, 0.5).v0 == -0.5


def test_interaction_kernel_scalar():
    phi, g = 0.6 + 0.3j, 1.7
    B = interaction_kernel(scalar_state(phi), g)
    assert B[0, 0] == pytest.approx(g * phi**2, rel=1e-15)


def test_interaction_kernel_commuting_generators():
    # Q and R diagonal: the covariant derivative vanishes and only g R^2 remains
    R = np.diag([0.5, 1.0 + 0.2j])
    Q = -0.5 * dag(R) @ R + 1j * np.diag([0.3, -0.1])
    B = interaction_kernel(UniformCMPS(Q, R), 2.0)
    assert np.allclose(B, 2.0 * R @ R, atol=1e-15)


@given(st.integers(0, 2**31), st.integers(1, 4))
def test_interaction_kernel_entrywise(seed, D):
    rng = np.random.default_rng(seed)
    Q, R = crandn(rng, D, D), crandn(rng, D, D)
    g = 0.8
    K = np.einsum("ia,aj->ij", Q, R) - np.einsum("ia,aj->ij", R, Q)
    ref = g * np.einsum("ia,aj->ij", R, R) - (np.einsum("ia,aj->ij", R, K) - np.einsum("ia,aj->ij", K, R))
    assert np.allclose(interaction_kernel(UniformCMPS(Q, R), g), ref, atol=1e-12)


def test_solve_F_without_particles_is_zero():
    D = 3
    Q = 1j * np.diag([0.1, 0.4, -0.3])
    dens = DensityMatrices(np.eye(D), np.eye(D) / D, np.asarray(1.0))
    F = solve_F(UniformCMPS(Q, np.zeros((D, D))), dens, LiebLinigerParams(1.0, 1.0))
    assert not np.any(F)


def test_solve_F_scalar_is_zero():
    s = scalar_state(0.9 - 0.1j, 0.3)
    F = solve_F(s, fixed_point_density(s), LiebLinigerParams(1.3, 0.7))
    assert abs(F[0, 0]) < 1e-15


@given(st.integers(0, 2**31), st.integers(2, 5))
def test_solve_F_residual(seed, D):
    s = random_uniform_state(D, seed=seed)
    p = LiebLinigerParams(1.1, 0.8)
    dens = fixed_point_density(s)
    F = solve_F(s, dens, p)
    K = comm(s.Q, s.R)
    Rd = dag(s.R)
    h = dag(K) @ K + p.v0 * Rd @ s.R + p.g * Rd @ Rd @ s.R @ s.R
    e = np.trace(h @ dens.rhoR)
    res = -apply_transfer_left(s.Q, s.R, F) - (h - e * np.eye(D))
    assert np.linalg.norm(res) < 1e-10 * (1 + np.linalg.norm(h))
    assert np.allclose(F, dag(F), atol=1e-14)
    assert abs(np.trace(F @ dens.rhoR)) < 1e-12 * (1 + np.linalg.norm(F))


def test_choose_P_formula(rng):
    s = random_uniform_state(3, seed=4)
    F = crandn(rng, 3, 3)
    F = F + dag(F)
    P = choose_P(s, fixed_point_density(s), F).P
    assert np.allclose(P, -1j * dag(s.R) @ comm(s.Q, s.R) + 1j * F, atol=1e-15)


# -- uniform flow ------------------------------------------------------------------------

def test_rhs_rejects_unknown_mode():
    with pytest.raises(ValueError):
        qgpe_rhs_uniform(scalar_state(0.5), None, LiebLinigerParams(1, 1), mode="complex")


@given(st.floats(0.1, 2.0), st.floats(-np.pi, np.pi), st.floats(0.2, 3.0), st.floats(0.1, 3.0))
def test_scalar_flow_is_mean_field_equation(amp, phase, g, mu):
    phi = amp * np.exp(1j * phase)
    p = LiebLinigerParams(g, mu)
    Qd, Rd = qgpe_rhs_uniform(scalar_state(phi), None, p)
    expected = -1j * (-mu + 2 * g * amp**2) * phi
    assert abs(Rd[0, 0] - expected) < 1e-12 * (1 + abs(expected))
    assert abs(Qd[0, 0] + np.conj(phi) * expected) < 1e-12 * (1 + abs(expected))


def test_flow_preserves_canonical_constraint_to_first_order(rng):
    s = random_uniform_state(4, seed=6)
    for mode in ("real", "imaginary"):
        Qd, Rd = qgpe_rhs_uniform(s, None, LiebLinigerParams(1.0, 1.0), mode)
        # d/dt (Q + Q^dag + R^dag R) = 0 along the flow
        lin = Qd + dag(Qd) + dag(Rd) @ s.R + dag(s.R) @ Rd
        assert np.linalg.norm(lin) < 1e-12 * np.linalg.norm(Rd)


def test_imaginary_flow_descends_energy():
    s = random_uniform_state(3, seed=2, scale=0.7)
    p = LiebLinigerParams(1.0, 1.2)
    Qd, Rd = qgpe_rhs_uniform(s, None, p, "imaginary")
    h = 1e-4
    moved = UniformCMPS(s.Q + h * Qd - 0.5 * h * h * dag(Rd) @ Rd, s.R + h * Rd)
    assert uniform_energy(moved, p) < uniform_energy(s, p)


@pytest.mark.parametrize("D", [1, 2, 3])
def test_gradient_through_tangent_metric(D):
    # energy change along a gauge-fixed direction W equals -2 Re <X, W>,
    # with X the imaginary-time flow; the curve keeps the state exactly canonical
    rng = np.random.default_rng(D)
    s = random_uniform_state(D, seed=10 + D, scale=0.8)
    p = LiebLinigerParams(1.0, 1.5)
    dens = fixed_point_density(s)
    _, X = qgpe_rhs_uniform(s, dens, p, "imaginary")
    W = crandn(rng, D, D)

    def energy(eps):
        Q = s.Q - eps * dag(s.R) @ W - 0.5 * eps**2 * dag(W) @ W
        return uniform_energy(UniformCMPS(Q, s.R + eps * W), p)

    h = 1e-4
    fd = (energy(h) - energy(-h)) / (2 * h)
    pred = -2 * tangent_metric(s, dens, TangentVector.gauge_fixed(s, X), TangentVector.gauge_fixed(s, W)).real
    assert abs(fd - pred) < 1e-6 * max(abs(pred), 1e-3)


def test_tangent_metric_positive_and_gauge_checked(rng):
    s = random_uniform_state(3, seed=1)
    dens = fixed_point_density(s)
    W = crandn(rng, 3, 3)
    tv = TangentVector.gauge_fixed(s, W)
    zero = TangentVector.gauge_fixed(s, np.zeros((3, 3)))
    assert tangent_metric(s, dens, tv, zero) == 0
    val = tangent_metric(s, dens, tv, tv)
    assert val.real > 0 and abs(val.imag) < 1e-14 * val.real
    with pytest.raises(GaugeFixingViolated):
        tangent_metric(s, dens, TangentVector(np.eye(3), W), tv)


# -- imaginary time ------------------------------------------------------------------------

@pytest.mark.parametrize("g,mu", [(1.0, 1.0), (0.3, 2.0), (5.0, 0.5)])
def test_scalar_ground_state_is_mean_field(g, mu):
    state, energies = imaginary_time_ground_state(LiebLinigerParams(g, mu), 1, tol=1e-10)
    n_ref, e_ref = mean_field_ground_state(g, mu)
    n = particle_density(state, fixed_point_density(state))
    assert n == pytest.approx(n_ref, rel=1e-8)
    assert energies[-1] == pytest.approx(e_ref, rel=1e-10)
    assert np.all(np.diff(energies) <= 1e-12 * abs(e_ref))


def test_already_converged_state_takes_no_steps():
    s = scalar_state(np.sqrt(0.5))
    state, energies = imaginary_time_ground_state(LiebLinigerParams(1.0, 1.0), 1, initial=s, tol=1e-8)
    assert len(energies) == 1
    assert np.array_equal(state.R, s.R)


def test_stalled_start_restarts_to_lower_minimum():
    # the real seed-0 start at D = 2 lands on two decoupled copies of the D = 1
    # solution; the search must notice and restart
    p = LiebLinigerParams(1.0, chemical_potential_for_gamma(1.0))
    _, e_mf = mean_field_ground_state(p.g, p.mu)
    state, energies = imaginary_time_ground_state(p, 2, tol=1e-9, seed=0, method="lbfgs")
    other, e_other = imaginary_time_ground_state(p, 2, tol=1e-9, seed=3, real=False, method="lbfgs")
    assert energies[-1] < e_mf - 0.1
    assert energies[-1] == pytest.approx(e_other[-1], rel=1e-8)
    assert np.all(np.diff(energies) <= 1e-12 * abs(energies[-1]))


def test_ground_state_gradient_vanishes():
    p = LiebLinigerParams(1.0, 1.4)
    state, _ = imaginary_time_ground_state(p, 3, tol=1e-9, seed=1, method="lbfgs")
    dens = fixed_point_density(state)
    _, X = qgpe_rhs_uniform(state, dens, p, "imaginary")
    tv = TangentVector.gauge_fixed(state, X)
    assert np.sqrt(tangent_metric(state, dens, tv, tv).real) < 1e-8


# -- real time -------------------------------------------------------------------------------

def test_scalar_real_time_phase_rotation():
    phi, g, mu = 0.8 * np.exp(0.4j), 1.2, 0.5
    p = LiebLinigerParams(g, mu)
    s = scalar_state(phi)
    T = 2.0
    traj = real_time_evolve(s, p, T, 0.002)
    omega = -mu + 2 * g * abs(phi) ** 2
    assert abs(traj.final.R[0, 0] - phi * np.exp(-1j * omega * T)) < 1e-10
    assert traj.energy_drift() < 1e-13
    assert np.ptp(traj.densities) < 1e-13


def test_real_time_ground_state_is_stationary():
    p = LiebLinigerParams(1.0, 1.4)
    state, _ = imaginary_time_ground_state(p, 2, tol=1e-11, seed=1, method="lbfgs")
    traj = real_time_evolve(state, p, 1.0, 0.01)
    assert traj.energy_drift() < 1e-12
    assert np.ptp(traj.densities) < 1e-9
    assert traj.final.canonical_residual() < 1e-13


def test_raw_rk4_keeps_canonical_constraint_over_1000_steps():
    # plain RK4 steps, no projection in between
    from qgpe.numerics import ode_step_rk4

    state, _ = imaginary_time_ground_state(LiebLinigerParams(1.0, 1.4), 3, tol=1e-9, seed=1, method="lbfgs")
    quench = LiebLinigerParams(1.5, 1.4)
    f = lambda t, y: qgpe_rhs_uniform(UniformCMPS(*y), None, quench, "real")
    y, dt, worst = (state.Q, state.R), 1e-3, 0.0
    for i in range(1000):
        y = ode_step_rk4(f, y, i * dt, dt)
        worst = max(worst, UniformCMPS(*y).canonical_residual())
    assert worst < 1e-8


def test_real_time_rejects_bad_arguments():
    s = scalar_state(0.5)
    with pytest.raises(ValueError):
        real_time_evolve(s, LiebLinigerParams(1, 1), 1.0, 0.0)


def test_real_time_zero_duration():
    s = scalar_state(0.5)
    traj = real_time_evolve(s, LiebLinigerParams(1, 1), 0.0, 0.1)
    assert traj.times == [0.0] and traj.final is s


def test_real_time_huge_step_detected():
    s = random_uniform_state(3, seed=1, scale=1.5)
    with pytest.raises(StepTooLarge) as info:
        real_time_evolve(s, LiebLinigerParams(5.0, 1.0), 1.0, 0.5)
    assert info.value.partial.times == [0.0]


# -- finite states ------------------------------------------------------------------------------

def _scalar_finite(grid, phi, bc=None):
    Rs = np.asarray(phi, complex)[:, None, None]
    Qs = -0.5 * np.abs(Rs) ** 2
    if bc is None:
        return FiniteCMPS(grid, Qs.astype(complex), Rs, [1.0], [1.0])
    return FiniteCMPS.from_profiles(grid, Qs.astype(complex), Rs, np.ones(1), np.ones(1), bc)


def test_finite_uniform_profile_matches_uniform_flow():
    phi = 0.7 * np.exp(0.3j)
    grid = np.linspace(0, 2, 21)
    s = _scalar_finite(grid, np.full(21, phi))
    p = LiebLinigerParams(1.3, 0.4)
    Qd, Rd, a, b = qgpe_rhs_finite(s, None, p)
    _, Ru = qgpe_rhs_uniform(scalar_state(phi), None, p)
    assert np.allclose(Rd[:, 0, 0], Ru[0, 0], atol=1e-12)
    # the boundary vectors only pick up a global phase
    for v, vd in ((s.v1, a), (s.v2, b)):
        assert abs((np.conj(v) @ vd).real) < 1e-14


def test_finite_dirichlet_walls_do_not_move():
    grid = np.linspace(0, 3, 31)
    s = _scalar_finite(grid, np.sin(np.pi * grid / 3), BoundaryCondition.dirichlet())
    Qd, Rd, _, _ = qgpe_rhs_finite(s, None, LiebLinigerParams(1.0, 1.0), "imaginary")
    assert Rd[0, 0, 0] == 0 and Rd[-1, 0, 0] == 0
    assert np.abs(Rd[1:-1]).max() > 0.1


def test_free_scalar_rhs_is_schroedinger():
    sig = 0.7
    grid = np.linspace(-6, 6, 401)
    phi = np.exp(-grid**2 / (2 * sig**2))
    Qd, Rd, _, _ = qgpe_rhs_finite(_scalar_finite(grid, phi), None, LiebLinigerParams(0.0, 0.0))
    lap = (grid**2 / sig**4 - 1 / sig**2) * phi
    assert np.abs(Rd[5:-5, 0, 0] - 1j * lap[5:-5]).max() < 5e-3


def test_free_wave_packet_spreads_like_schroedinger():
    sig, T = 0.7, 0.1
    grid = np.linspace(-5, 5, 101)
    s = _scalar_finite(grid, np.exp(-grid**2 / (2 * sig**2)))
    traj = real_time_evolve(s, LiebLinigerParams(0.0, 0.0), T, 0.2 * s.dx**2)
    z = sig**2 + 2j * T
    exact = np.sqrt(sig**2 / z) * np.exp(-grid**2 / (2 * z))
    assert np.abs(np.abs(traj.final.Rs[:, 0, 0]) - np.abs(exact)).max() < 5e-3
    assert np.ptp(traj.densities) < 1e-6 * traj.densities[0]


def test_neumann_uniform_state_is_stationary():
    from qgpe.tdvp import imaginary_time_finite

    phi = np.sqrt(0.5)
    grid = np.linspace(0, 4, 21)
    s = _scalar_finite(grid, np.full(21, phi))
    out, energies = imaginary_time_finite(s, LiebLinigerParams(1.0, 1.0), dtau=0.2 * s.dx**2, tol=1e-9)
    n = particle_density(out, propagate_density(out))
    assert np.allclose(n, 0.5, atol=1e-10)
    assert np.ptp(energies) < 1e-12


def test_hard_wall_ground_state_against_boundary_value_solution(dirichlet_box, hard_wall_profile):
    errs = []
    for N in (21, 41):
        out = dirichlet_box(N)["state"]
        n = particle_density(out, propagate_density(out))
        assert n[0] == 0 and n[-1] == 0
        errs.append(np.abs(n - hard_wall_profile(out.grid)).max())
    assert errs[1] < 2e-3
    # second order in the grid spacing
    assert 3.5 < errs[0] / errs[1] < 4.6
