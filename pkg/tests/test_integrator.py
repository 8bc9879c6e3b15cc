import warnings

import numpy as np
import pytest

from fragfem import integrator as ti
from fragfem.assembly import (
    GainQuadrature,
    assemble_gain_delta,
    assemble_gain_smooth,
    assemble_mass,
    assemble_selection,
)
from fragfem.errors import (
    NumericalError,
    OutOfDomainError,
    SingularMatrixError,
    ValidationError,
)
from fragfem.fem_basis import build_dof_map, make_reference_element
from fragfem.mesh import DomainBox, GridSpec, build_mesh
from fragfem.model import bundled_test_case

# 1-dof system: M=1, A=0, B=b0 turns the stepper into u' = b0*u.
M1 = np.array([[1.0]])
A1 = np.zeros((1, 1))


def small_space(box, cells, degree, grading="uniform"):
    mesh = build_mesh(box, GridSpec(cells, grading))
    ref = make_reference_element(mesh.dim, degree)
    return mesh, build_dof_map(mesh, degree), ref


# ---------------------------------------------------------------- TimeGrid

def test_time_grid_basics():
    g = ti.TimeGrid(1.0, 4)
    assert g.tau == 0.25
    assert g.time(3) == pytest.approx(0.75)
    assert np.allclose(g.times(), [0.0, 0.25, 0.5, 0.75, 1.0])


def test_time_grid_with_tau_rounds():
    g = ti.TimeGrid.with_tau(1.0, 0.01)
    assert g.nsteps == 100
    assert ti.TimeGrid.with_tau(1.0, 0.3).nsteps == 3   # round, not trunc
    assert ti.TimeGrid.with_tau(1.0, 10.0).nsteps == 1  # floor at one step


def test_time_grid_validation():
    with pytest.raises(ValidationError):
        ti.TimeGrid(0.0, 10)
    with pytest.raises(ValidationError):
        ti.TimeGrid(-1.0, 10)
    with pytest.raises(ValidationError):
        ti.TimeGrid(1.0, 0)


# ---------------------------------------------------------- StateTrajectory

def test_trajectory_policies():
    tr = ti.StateTrajectory(2, policy="all")
    for n in range(4):
        tr.push(n, 0.1 * n, np.full(2, float(n)))
    assert [s[0] for s in tr.samples] == [0, 1, 2, 3]
    assert tr.last[0] == 3 and tr.prev[0] == 2

    tr = ti.StateTrajectory(2, policy="last-two")
    for n in range(4):
        tr.push(n, 0.1 * n, np.full(2, float(n)))
    assert tr.samples == []
    assert tr.last[2][0] == 3.0 and tr.prev[2][0] == 2.0

    tr = ti.StateTrajectory(2, policy="sampled", sample_indices=[0, 2])
    for n in range(4):
        tr.push(n, 0.1 * n, np.full(2, float(n)))
    assert [s[0] for s in tr.samples] == [0, 2]


def test_trajectory_copies_state():
    tr = ti.StateTrajectory(2, policy="all")
    a = np.array([1.0, 2.0])
    tr.push(0, 0.0, a)
    a[0] = 99.0
    assert tr.last[2][0] == 1.0


def test_trajectory_validation():
    with pytest.raises(ValidationError):
        ti.StateTrajectory(2, policy="everything")
    tr = ti.StateTrajectory(2)
    with pytest.raises(ValidationError):
        tr.push(0, 0.0, np.zeros(3))
    with pytest.raises(ValidationError):
        tr.last
    tr.push(0, 0.0, np.zeros(2))
    with pytest.raises(ValidationError):
        tr.prev


def test_trajectory_nonfinite_names_step():
    tr = ti.StateTrajectory(2)
    tr.push(0, 0.0, np.zeros(2))
    with pytest.raises(NumericalError, match="step 7"):
        tr.push(7, 0.07, np.array([1.0, np.nan]))


# ----------------------------------------------------- LinearSolveWorkspace

def test_workspace_solves_and_verifies():
    rng = np.random.default_rng(3)
    mat = rng.normal(size=(8, 8)) + 8.0 * np.eye(8)
    ws = ti.LinearSolveWorkspace(mat)
    rhs = rng.normal(size=8)
    x = ws.solve(rhs, verify=True)
    assert np.abs(mat @ x - rhs).max() <= 1e-10 * np.abs(rhs).max()


def test_workspace_rejects_nonsquare():
    with pytest.raises(ValidationError):
        ti.LinearSolveWorkspace(np.zeros((2, 3)))


def test_singular_matrix_message_carries_advisory():
    sing = np.array([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(SingularMatrixError, match="tau < 0.05"):
        ti.LinearSolveWorkspace(sing, tau=0.1, b0=5.0)
    with pytest.raises(SingularMatrixError, match="tau = 0.1"):
        ti.LinearSolveWorkspace(sing, tau=0.1)


# ------------------------------------------------------------- projections

def test_l2_project_reproduces_degree_r_fields():
    box = DomainBox((0.0, 0.0), (2.0, 1.0))
    for degree, field in [(1, lambda p: 1.0 + 2.0 * p[:, 0] - p[:, 1]),
                          (2, lambda p: p[:, 0] * p[:, 1] + p[:, 1] ** 2),
                          (3, lambda p: p[:, 0] ** 3 - p[:, 0] * p[:, 1])]:
        mesh, dm, ref = small_space(box, (3, 2), degree)
        alpha = ti.l2_project(mesh, dm, ref, field=field)
        vals = field(dm.coords)
        assert np.abs(alpha - vals).max() <= 1e-11


def test_l2_project_needs_exactly_one_source():
    mesh, dm, ref = small_space(DomainBox((0.0, 0.0), (1.0, 1.0)), (2, 2), 1)
    with pytest.raises(ValidationError):
        ti.l2_project(mesh, dm, ref)
    with pytest.raises(ValidationError):
        ti.l2_project(mesh, dm, ref, field=lambda p: p[:, 0], dirac=(0.5, 0.5))


def test_dirac_projection_preserves_number_exactly():
    # b_i = phi_i(x0) and the basis sums to one, so 1^T M alpha = 1 holds
    # at machine precision no matter the grid.
    case = bundled_test_case("1")
    mesh, dm, ref = small_space(case.domain, (9, 9), 1, grading="geometric")
    mass = assemble_mass(mesh, dm, ref)
    alpha = ti.l2_project(mesh, dm, ref, dirac=(1.0, 1.0), mass=mass)
    m00 = np.ones(dm.ndofs) @ (mass @ alpha)
    assert m00 == pytest.approx(1.0, abs=1e-12)


def test_dirac_point_must_be_strictly_inside():
    mesh, dm, ref = small_space(DomainBox((0.0, 0.0), (1.0, 1.0)), (2, 2), 1)
    with pytest.raises(OutOfDomainError):
        ti.dirac_vector(mesh, dm, ref, (0.0, 0.5))
    with pytest.raises(OutOfDomainError):
        ti.dirac_vector(mesh, dm, ref, (0.5, 1.5))
    with pytest.raises(ValidationError):
        ti.dirac_vector(mesh, dm, ref, (0.5, 0.5, 0.5))


# ------------------------------------------------------------ single steps

def test_bdf1_matches_scalar_formula():
    tau = 0.05
    B = np.array([[0.7]])
    ws = ti.LinearSolveWorkspace(ti.bdf1_matrix((M1, A1, B), tau))
    a1 = ti.step_bdf1(ws, M1, np.array([2.0]), tau)
    assert a1[0] == pytest.approx(2.0 / (1.0 - tau * 0.7), rel=1e-14)


def test_bdf2_matches_scalar_formula():
    tau = 0.05
    B = np.array([[0.7]])
    a0, a1 = np.array([1.0]), np.array([1.2])
    ws = ti.LinearSolveWorkspace(ti.bdf2_matrix((M1, A1, B), tau))
    a2 = ti.step_bdf2(ws, M1, a1, a0, tau)
    expect = (2.0 * 1.2 - 0.5 * 1.0) / (1.5 - tau * 0.7)
    assert a2[0] == pytest.approx(expect, rel=1e-14)


# -------------------------------------------------------------------- runs

def test_run_requires_two_steps():
    with pytest.raises(ValidationError):
        ti.run((M1, A1, A1), ti.TimeGrid(1.0, 1), np.array([1.0]))


def test_run_stationary_when_gain_equals_loss():
    # B = A makes every state an equilibrium.
    M = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    A = np.array([[1.0, 0.2], [0.2, 1.0]])
    tr = ti.run((M, A, A.copy()), ti.TimeGrid(1.0, 10), np.array([3.0, -1.0]))
    assert np.abs(tr.last[2] - [3.0, -1.0]).max() <= 1e-13


def test_run_zero_state_stays_zero():
    M = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    A = np.array([[1.0, 0.2], [0.2, 1.0]])
    tr = ti.run((M, A, 0.5 * A), ti.TimeGrid(1.0, 10), np.zeros(2))
    assert np.abs(tr.last[2]).max() == 0.0


def test_run_second_order_in_time():
    # u' = 0.7 u: halving tau shrinks the error by ~4.
    B = np.array([[0.7]])
    errs = []
    for nsteps in (20, 40, 80):
        tr = ti.run((M1, A1, B), ti.TimeGrid(1.0, nsteps), np.array([1.0]))
        errs.append(abs(tr.last[2][0] - np.exp(0.7)) / np.exp(0.7))
    assert 3.7 <= errs[0] / errs[1] <= 4.3   # measured 3.959
    assert 3.7 <= errs[1] / errs[2] <= 4.3   # measured 3.978


def test_run_accepts_system_matrices_bundle():
    case = bundled_test_case("3")
    mesh, dm, ref = small_space(case.domain, (4, 4), 1)
    from fragfem.assembly import assemble_system
    mats = assemble_system(mesh, dm, ref, case.gamma, case.beta)
    a0 = ti.l2_project(mesh, dm, ref, dirac=(1.0, 1.0), mass=mats.M)
    tr = ti.run(mats, ti.TimeGrid(0.1, 5), a0)
    assert np.isfinite(tr.last[2]).all()


def test_run_warns_on_stability_advisory():
    B = np.array([[0.7]])
    with pytest.warns(RuntimeWarning, match="stability advisory"):
        ti.run((M1, A1, B), ti.TimeGrid(1.0, 2), np.array([1.0]), b0=5.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ti.run((M1, A1, B), ti.TimeGrid(1.0, 100), np.array([1.0]), b0=5.0)


def test_run_load_is_evaluated_at_new_level():
    # u' = 1 with u(0)=0 is reproduced exactly by both schemes, but only
    # if the load enters at the new time level.  The extrapolated
    # bootstrap additionally samples the half level.
    seen = []

    def load(t):
        seen.append(t)
        return np.array([1.0])

    tr = ti.run((M1, A1, A1 * 0.0), ti.TimeGrid(1.0, 4), np.zeros(1),
                load=load, storage="all")
    assert seen == pytest.approx([0.125, 0.25, 0.5, 0.75, 1.0])
    for n, t, a in tr.samples:
        assert a[0] == pytest.approx(t, rel=1e-13, abs=1e-15)


def test_run_nonfinite_load_aborts_with_step_index():
    def load(t):
        return np.array([np.nan]) if t > 0.5 else np.array([0.0])

    with pytest.raises(NumericalError, match="step 3"):
        ti.run((M1, A1, A1), ti.TimeGrid(1.0, 4), np.array([1.0]), load=load)


def test_run_sampling_returns_requested_levels():
    B = np.array([[0.7]])
    tr = ti.run((M1, A1, B), ti.TimeGrid(1.0, 10), np.array([1.0]),
                sample_indices=[0, 5, 10])
    assert [s[0] for s in tr.samples] == [0, 5, 10]


# ------------------------------------------------- assembled-system checks

def test_halving_case_mass_is_conserved_by_stepper():
    # x1+x2 lies in the P1 space, and the halving gain matrix satisfies
    # the discrete mass identity, so the first moment rides through the
    # stepper at machine precision (measured drift 2.2e-13 over 100
    # steps on this grid).
    case = bundled_test_case("3")
    mesh, dm, ref = small_space(case.domain, (12, 12), 1, grading="geometric")
    M = assemble_mass(mesh, dm, ref)
    A = assemble_selection(mesh, dm, ref, case.gamma)
    B = assemble_gain_delta(mesh, dm, ref, case.gamma)
    wmass = ti.load_vector(mesh, dm, ref, lambda p: p[:, 0] + p[:, 1])
    a0 = ti.l2_project(mesh, dm, ref, dirac=(1.0, 1.0), mass=M)
    assert wmass @ a0 == pytest.approx(2.0, rel=1e-12)
    tr = ti.run((M, A, B), ti.TimeGrid(1.0, 100), a0, b0=float(case.gamma.a0))
    assert abs(wmass @ tr.last[2] - wmass @ a0) <= 1e-10


def test_halving_case_number_moment_tracks_exponential():
    # m00(t) = e^t for the halving case; measured rel error 1.08e-4 at
    # t=1 on this grid with tau=0.01.
    case = bundled_test_case("3")
    mesh, dm, ref = small_space(case.domain, (12, 12), 1, grading="geometric")
    M = assemble_mass(mesh, dm, ref)
    A = assemble_selection(mesh, dm, ref, case.gamma)
    B = assemble_gain_delta(mesh, dm, ref, case.gamma)
    a0 = ti.l2_project(mesh, dm, ref, dirac=(1.0, 1.0), mass=M)
    tr = ti.run((M, A, B), ti.TimeGrid(1.0, 100), a0, b0=float(case.gamma.a0))
    m00 = np.ones(dm.ndofs) @ (M @ tr.last[2])
    assert abs(m00 - np.e) / np.e <= 5e-4


def test_binary_smooth_case_number_moment():
    # Uniform binary kernel on a geometrically graded 10x10 P1 grid:
    # measured m00 rel errors 1.08e-3 at t=0.1 and 1.81e-2 at t=1.
    case = bundled_test_case("1")
    mesh, dm, ref = small_space(case.domain, (10, 10), 1, grading="geometric")
    M = assemble_mass(mesh, dm, ref)
    A = assemble_selection(mesh, dm, ref, case.gamma)
    quad = GainQuadrature(outer_exactness=4, inner_exactness=4,
                          panel_ratio_cap=4.0)
    B = assemble_gain_smooth(mesh, dm, ref, case.beta, case.gamma, quad)
    a0 = ti.l2_project(mesh, dm, ref, dirac=(1.0, 1.0), mass=M)
    w00 = M @ np.ones(dm.ndofs)
    tr = ti.run((M, A, B), ti.TimeGrid(1.0, 100), a0, b0=1.0,
                sample_indices=[10, 100])
    rels = {n: abs(w00 @ a - np.exp(t)) / np.exp(t)
            for n, t, a in tr.samples if n > 0}
    assert rels[10] <= 2.5e-3
    assert rels[100] <= 4e-2
