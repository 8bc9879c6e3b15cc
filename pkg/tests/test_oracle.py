import math

import numpy as np
import pytest

from fragfem import integrator as ti
from fragfem import oracle as oc
from fragfem.assembly import assemble_gain_smooth
from fragfem.errors import QuadratureConvergenceError, ValidationError
from fragfem.expressions import parse_expression
from fragfem.fem_basis import build_dof_map, make_reference_element
from fragfem.mesh import DomainBox, GridSpec, build_mesh
from fragfem.model import (
    SMOOTH,
    DiracIC,
    FragmentationKernel,
    SelectionFn,
    TestCase,
    bundled_test_case,
)

CASE1 = bundled_test_case("1")


def ones(points, t=0.0):
    return np.ones(len(points))


def test_zero_field_gain_is_zero():
    v = oc.brute_force_gain(lambda p, t=0.0: np.zeros(len(p)),
                            CASE1.beta, CASE1.gamma, (1.0, 1.0), CASE1.domain)
    assert v == 0.0


def test_upper_corner_gain_is_zero():
    v = oc.brute_force_gain(ones, CASE1.beta, CASE1.gamma, (2.0, 2.0),
                            CASE1.domain)
    assert v == 0.0


def test_analytic_spot_value():
    # ∫_[1,2]^2 2/(y1 y2) dy = 2 (ln 2)^2
    v = oc.brute_force_gain(ones, CASE1.beta, CASE1.gamma, (1.0, 1.0),
                            CASE1.domain)
    assert v == pytest.approx(2.0 * math.log(2.0) ** 2, abs=1e-8)


def test_spot_value_near_singular_corner():
    # same integral from (a, a): 2 ln(2/a)^2, graded panels handle a -> 0
    a = 1e-6
    v = oc.brute_force_gain(ones, CASE1.beta, CASE1.gamma, (a, a),
                            CASE1.domain)
    assert v == pytest.approx(2.0 * math.log(2.0 / a) ** 2, rel=1e-9)


def test_base_panel_halving_invariance():
    kw = dict(t=0.0, rel_tol=1e-9)
    v1 = oc.brute_force_gain(ones, CASE1.beta, CASE1.gamma, (0.5, 1.5),
                             CASE1.domain, base_splits=1, **kw)
    v2 = oc.brute_force_gain(ones, CASE1.beta, CASE1.gamma, (0.5, 1.5),
                             CASE1.domain, base_splits=2, **kw)
    assert abs(v1 - v2) <= 1e-8 * abs(v1)


def test_gain_rejects_bad_inputs():
    case3 = bundled_test_case("3")
    with pytest.raises(ValidationError):
        oc.brute_force_gain(ones, case3.beta, case3.gamma, (1.0, 1.0),
                            case3.domain)  # delta kernel has no density
    with pytest.raises(ValidationError):
        oc.brute_force_gain(ones, CASE1.beta, CASE1.gamma, (1.0,),
                            CASE1.domain)
    with pytest.raises(ValidationError):
        oc.brute_force_gain(ones, CASE1.beta, CASE1.gamma, (3.0, 1.0),
                            CASE1.domain)


def test_no_convergence_reports_estimate_and_gap():
    with pytest.raises(QuadratureConvergenceError) as err:
        oc.brute_force_gain(ones, CASE1.beta, CASE1.gamma, (0.5, 0.5),
                            CASE1.domain, rel_tol=1e-30, max_levels=2)
    assert err.value.estimate is not None
    assert err.value.gap is not None


def test_fe_field_matches_direct_evaluation():
    mesh = build_mesh(DomainBox((0.0, 0.0), (1.0, 1.0)), GridSpec((3, 3)))
    ref = make_reference_element(2, 2)
    dm = build_dof_map(mesh, 2)
    alpha = ti.l2_project(mesh, dm, ref,
                          field=lambda p: p[:, 0] ** 2 + 0.5 * p[:, 1])
    field = oc.fe_field(mesh, dm, ref, alpha)
    rng = np.random.default_rng(5)
    pts = rng.uniform(0.05, 0.95, size=(40, 2))
    assert np.abs(field(pts) - (pts[:, 0] ** 2 + 0.5 * pts[:, 1])).max() \
        <= 1e-11


# -------------------------------------------------------- gain matrix check

@pytest.fixture(scope="module")
def benign_space():
    # away from the lower corner the integrand is mild, so the check
    # isolates quadrature agreement instead of fighting 1/y blow-up
    mesh = build_mesh(DomainBox((1.0, 1.0), (2.0, 2.0)), GridSpec((4, 4)))
    return mesh


@pytest.mark.parametrize("degree", [1, 2])
def test_gain_matrix_check_small_mesh(benign_space, degree):
    mesh = benign_space
    ref = make_reference_element(2, degree)
    dm = build_dof_map(mesh, degree)
    B = assemble_gain_smooth(mesh, dm, ref, CASE1.beta, CASE1.gamma)
    alpha = ti.l2_project(mesh, dm, ref, field=lambda p: np.ones(len(p)))
    mismatch = oc.gain_matrix_check(B, alpha, mesh, dm, ref,
                                    CASE1.beta, CASE1.gamma)
    assert mismatch <= 1e-6   # measured 8.4e-9 (P1), 1.0e-8 (P2)


def test_gain_matrix_check_zero_state(benign_space):
    mesh = benign_space
    ref = make_reference_element(2, 1)
    dm = build_dof_map(mesh, 1)
    B = assemble_gain_smooth(mesh, dm, ref, CASE1.beta, CASE1.gamma)
    assert oc.gain_matrix_check(B, np.zeros(dm.ndofs), mesh, dm, ref,
                                CASE1.beta, CASE1.gamma) == 0.0


def test_gain_matrix_check_flags_corruption(benign_space):
    mesh = benign_space
    ref = make_reference_element(2, 1)
    dm = build_dof_map(mesh, 1)
    B = assemble_gain_smooth(mesh, dm, ref, CASE1.beta, CASE1.gamma).copy()
    alpha = ti.l2_project(mesh, dm, ref, field=lambda p: np.ones(len(p)))
    B[3, 5] += 1e-3
    assert oc.gain_matrix_check(B, alpha, mesh, dm, ref,
                                CASE1.beta, CASE1.gamma) > 1e-4


# ------------------------------------------------------------ residual/MMS

def test_truncation_residual_flags_decaying_exponential_case():
    case = bundled_test_case("conv1")
    report, source = oc.residual_and_mms(case)
    assert report.verdict == "needs_mms"
    assert report.max_abs > report.threshold
    assert source is not None
    assert source.provenance == "closed-form truncated gain"


def test_all_convergence_cases_need_a_source():
    # None of the closed-form solutions annihilates the tail above the
    # truncation boundary, so every sweep runs in manufactured mode.
    for cid in ("conv1", "conv2"):
        report, _ = oc.residual_and_mms(bundled_test_case(cid))
        assert report.verdict == "needs_mms"
    report, _ = oc.residual_and_mms(bundled_test_case("conv3"),
                                    times=(0.0, 0.5), per_axis=2)
    assert report.verdict == "needs_mms"


def test_stationary_pair_solves_truncated_form():
    case = TestCase(
        case_id="stat", dim=2,
        gamma=SelectionFn(parse_expression("0"), 2, a0=0.0),
        beta=FragmentationKernel(SMOOTH, 2, parse_expression("2/(y1*y2)")),
        ic=DiracIC((1.0, 1.0)), domain=DomainBox((1e-9, 1e-9), (2.0, 2.0)),
        horizon=1.0, exact_moments={},
        exact_solution=parse_expression("exp(-x1-x2)"), exact_gain=None,
        description="no selection, nothing fragments")
    report, source = oc.residual_and_mms(case)
    assert report.verdict == "solves_truncated"
    assert report.max_abs == 0.0
    assert source is None


def test_closed_form_gain_agrees_with_brute_force():
    # the bundled truncated-gain formulas against the adaptive oracle
    case = bundled_test_case("conv1")

    def u(p, t):
        return case.exact_solution_at(p, t)

    pts = np.array([[0.3, 0.7], [1.0, 1.0], [0.05, 1.6]])
    for t in (0.0, 0.5):
        cf = case.exact_gain(pts, t)
        bf = np.array([
            oc.brute_force_gain(u, case.beta, case.gamma, p, case.domain,
                                t=t)
            for p in pts])
        assert np.abs(cf - bf).max() <= 1e-8 * np.abs(cf).max()


def test_mms_source_is_the_strong_form_residual():
    case = bundled_test_case("conv1")
    _, source = oc.residual_and_mms(case)
    pts = np.array([[0.4, 0.9], [1.3, 0.2]])
    t = 0.25
    dudt = case.exact_solution.diff("t")
    env = {"x1": pts[:, 0], "x2": pts[:, 1], "t": t}
    expect = (np.asarray(dudt.evaluate(env), dtype=float)
              + case.gamma(pts) * case.exact_solution_at(pts, t)
              - case.exact_gain(pts, t))
    assert np.abs(source(pts, t) - expect).max() <= 1e-13
