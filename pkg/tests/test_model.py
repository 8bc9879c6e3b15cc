import math

import numpy as np
import pytest

from fragfem.errors import ValidationError
from fragfem.expressions import parse_expression
from fragfem.fem_basis import box_quadrature
from fragfem.mesh import DomainBox
from fragfem.model import (
    DiracIC,
    FieldIC,
    FragmentationKernel,
    HALVING_DELTA,
    SMOOTH,
    SelectionFn,
    b0_estimate,
    bundled_test_case,
    kernel_mass_check,
)

ALL_IDS = ["1", "2", "3", "4", "5", "conv1", "conv2", "conv3"]


def test_bundled_ids_and_dims():
    dims = {"1": 2, "2": 2, "3": 2, "4": 2, "5": 3,
            "conv1": 2, "conv2": 2, "conv3": 3}
    for cid in ALL_IDS:
        case = bundled_test_case(cid)
        assert case.case_id == cid
        assert case.dim == dims[cid]
        assert case.domain.dim == dims[cid]
    assert bundled_test_case(1).case_id == "1"  # int ids accepted
    with pytest.raises(ValidationError):
        bundled_test_case("6")


def test_kernel_kinds():
    assert bundled_test_case("1").beta.kind == SMOOTH
    assert bundled_test_case("3").beta.kind == HALVING_DELTA
    assert bundled_test_case("4").beta.is_delta
    assert bundled_test_case("3").beta.multiplicity == 2.0
    assert bundled_test_case("3").beta.gain_substitution_factor() == 8.0  # 2*2^2
    assert bundled_test_case("5").beta.expr.to_string() == "8/(y1*y2*y3)"


def test_exact_moment_spot_values():
    c1 = bundled_test_case("1")
    assert c1.exact_moments[(0, 0)](1.0) == pytest.approx(math.e, rel=1e-15)
    assert c1.exact_moments[(1, 0)](2.5) == 1.0  # mass conserving
    assert c1.exact_moments[(1, 1)](1.0) == pytest.approx(math.exp(-0.5), rel=1e-15)

    c2 = bundled_test_case("2")
    assert c2.exact_moments[(0, 0)](3.0) == 7.0
    assert c2.exact_moments[(1, 0)](3.0) == 1.0

    c3 = bundled_test_case("3")
    assert c3.exact_moments[(0, 0)](1.0) == pytest.approx(math.e, rel=1e-15)
    assert c3.exact_moments[(1, 1)](1.0) == pytest.approx(math.exp(-0.5), rel=1e-15)

    c5 = bundled_test_case("5")
    assert c5.exact_moments[(0, 0, 0)](1.0) == 8.0
    assert c5.exact_moments[(1, 1, 1)](17.0) == 1.0


def test_moments_start_at_one():
    # Dirac at (1,...,1) has every moment equal to 1 at t=0
    for cid in ["1", "2", "3", "4", "5"]:
        case = bundled_test_case(cid)
        assert isinstance(case.ic, DiracIC)
        assert case.ic.point == (1.0,) * case.dim
        for order, m in case.exact_moments.items():
            assert m(0.0) == pytest.approx(1.0, abs=1e-15), (cid, order)


def test_oversize_fragments_are_zero():
    rng = np.random.default_rng(7)
    for cid in ["1", "2", "5", "conv1", "conv2", "conv3"]:
        beta = bundled_test_case(cid).beta
        d = beta.dim
        y = rng.uniform(0.1, 2.0, size=(1000, d))
        x = y * rng.uniform(0.0, 1.0, size=(1000, d))
        k = rng.integers(0, d, size=1000)
        x[np.arange(1000), k] = y[np.arange(1000), k] * rng.uniform(1.0001, 3.0, 1000)
        assert np.all(beta(x, y) == 0.0)
        inside = y * rng.uniform(0.001, 1.0, size=(1000, d))
        assert np.all(beta(inside, y) > 0.0)


def test_kernel_mass_check_values():
    quad2 = box_quadrature(2, 4)
    quad3 = box_quadrature(3, 4)

    nu, ratio = kernel_mass_check(bundled_test_case("1").beta, (1.0, 1.0), quad2)
    assert nu == pytest.approx(2.0, rel=1e-14)
    assert ratio == pytest.approx(1.0, rel=1e-14)

    # scale invariance of the binary uniform kernel
    nu, ratio = kernel_mass_check(bundled_test_case("1").beta, (0.3, 1.7), quad2)
    assert nu == pytest.approx(2.0, rel=1e-14)
    assert ratio == pytest.approx(1.0, rel=1e-14)

    nu, ratio = kernel_mass_check(bundled_test_case("3").beta, (1.0, 1.0), quad2)
    assert (nu, ratio) == (2.0, 1.0)

    # case 5 kernel produces 8 daughters and is not mass conserving
    nu, ratio = kernel_mass_check(bundled_test_case("5").beta, (1.0, 1.0, 1.0), quad3)
    assert nu == pytest.approx(8.0, rel=1e-14)
    assert ratio == pytest.approx(4.0, rel=1e-14)

    nu, ratio = kernel_mass_check(bundled_test_case("conv2").beta, (1.0, 1.0), quad2)
    assert nu == pytest.approx(4.0, rel=1e-14)
    assert ratio == pytest.approx(2.0, rel=1e-14)


# reference values from adaptive quadrature of the gain integrand
# (scipy dblquad / quad, epsrel 1e-13)
CONV_GAIN_REFS = {
    "conv1": [((0.5, 0.5), 0.0, 0.52198261605050322),
              ((0.25, 1.0), 1.0, 0.40139366756327888),
              ((1e-3, 0.5), 0.5, 13.064302093394112)],
    "conv2": [((0.5, 1.0), 0.5, 0.052445676367814331),
              ((0.1, 0.1), 0.0, 4.4859663939230794),
              ((1.0, 1.5), 2.0, 0.0021362934858622415)],
    "conv3": [((0.5, 0.5, 0.5), 0.0, 0.26666686889165542),
              ((0.25, 0.5, 1.0), 1.0, 0.17308462781335252)],
}


@pytest.mark.parametrize("cid", ["conv1", "conv2", "conv3"])
def test_closed_form_gain_matches_quadrature_reference(cid):
    case = bundled_test_case(cid)
    for x, t, ref in CONV_GAIN_REFS[cid]:
        got = case.exact_gain(np.array([x]), t)[0]
        assert got == pytest.approx(ref, rel=1e-12), (x, t)


def test_exact_solution_values():
    c = bundled_test_case("conv1")
    assert c.exact_solution_at([(0.0, 0.0)], 1.0)[0] == 8.0
    # initial condition field agrees with the exact solution at t=0
    pts = np.array([[0.3, 0.7], [1.0, 1.5], [2.0, 0.1]])
    np.testing.assert_allclose(c.ic(pts), c.exact_solution_at(pts, 0.0), rtol=1e-15)

    c2 = bundled_test_case("conv2")
    np.testing.assert_allclose(c2.ic(pts), c2.exact_solution_at(pts, 0.0), rtol=1e-15)

    c3 = bundled_test_case("conv3")
    pts3 = np.array([[0.3, 0.7, 1.1], [1.0, 1.5, 0.2]])
    np.testing.assert_allclose(c3.ic(pts3), c3.exact_solution_at(pts3, 0.0), rtol=1e-15)


def test_b0_estimates():
    # delta kernels: operator bound 2*2^(d/2)*max(selection)
    c3 = bundled_test_case("3")
    assert b0_estimate(c3.gamma, c3.beta, c3.domain) == pytest.approx(4.0, rel=1e-9)
    c4 = bundled_test_case("4")
    assert b0_estimate(c4.gamma, c4.beta, c4.domain) == pytest.approx(16.0, rel=1e-9)

    # singular uniform kernel near the tiny lower bound: bound blows up,
    # which makes the step size advisory unsatisfiable (by design)
    c1 = bundled_test_case("1")
    assert b0_estimate(c1.gamma, c1.beta, c1.domain) > 1e17

    # benign domain: max of 2/(y1 y2) over [1,2]^2 is 2 at y=(1,1)
    box = DomainBox((1.0, 1.0), (2.0, 2.0))
    assert b0_estimate(c1.gamma, c1.beta, box) == pytest.approx(2.0, rel=1e-12)


def test_selection_validation():
    with pytest.raises(ValidationError, match="x3"):
        SelectionFn(parse_expression("x1+x3"), 2)
    with pytest.raises(ValidationError, match="y1"):
        SelectionFn(parse_expression("y1"), 2)
    g = SelectionFn(parse_expression("x1+x2"), 2)
    assert g.on_y().to_string() == "y1+y2"
    np.testing.assert_allclose(g(np.array([[1.0, 2.0], [0.5, 0.5]])), [3.0, 1.0])


def test_kernel_validation():
    with pytest.raises(ValidationError):
        FragmentationKernel(SMOOTH, 2)  # missing expression
    with pytest.raises(ValidationError):
        FragmentationKernel(HALVING_DELTA, 2, parse_expression("1"))
    with pytest.raises(ValidationError):
        FragmentationKernel("other", 2)
    delta = FragmentationKernel(HALVING_DELTA, 2)
    with pytest.raises(ValidationError):
        delta(np.zeros((1, 2)), np.ones((1, 2)))
    with pytest.raises(ValidationError):
        FragmentationKernel(SMOOTH, 2, parse_expression("t*y1"))


def test_field_ic_evaluation():
    ic = FieldIC(parse_expression("x1*x2"), 2)
    np.testing.assert_allclose(ic(np.array([[2.0, 3.0]])), [6.0])
