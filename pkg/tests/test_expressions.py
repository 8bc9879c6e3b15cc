import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fragfem.errors import ParseError, ValidationError
from fragfem.expressions import KernelExpression, parse_expression


def test_binary_kernel_value():
    e = parse_expression("2/(y1*y2)")
    assert e.evaluate({"y1": 1.0, "y2": 2.0}) == 1.0


def test_sum_selection_value():
    e = parse_expression("x1+x2")
    assert e.evaluate({"x1": 0.3, "x2": 0.7}) == 1.0


def test_exact_solution_value():
    e = parse_expression("(1+t)^3*exp(-(x1+x2)*(1+t))")
    assert e.evaluate({"x1": 0.0, "x2": 0.0, "t": 1.0}) == 8.0


def test_literal_tree_is_exact():
    # literal-only trees evaluate without rounding beyond the float ops
    e = parse_expression("0.1+0.2")
    assert e.evaluate({}) == 0.1 + 0.2
    assert parse_expression("2^-3").evaluate({}) == 0.125


def test_precedence():
    assert parse_expression("2+3*4").evaluate({}) == 14.0
    assert parse_expression("2*3^2").evaluate({}) == 18.0
    assert parse_expression("-2^2").evaluate({}) == -4.0
    assert parse_expression("2^3^2").evaluate({}) == 512.0  # right assoc
    assert parse_expression("8/4/2").evaluate({}) == 1.0  # left assoc
    assert parse_expression("1-2-3").evaluate({}) == -4.0


def test_unknown_identifier_rejected():
    with pytest.raises(ParseError, match="z1"):
        parse_expression("x1+z1")
    with pytest.raises(ParseError, match="foo"):
        parse_expression("foo(x1)")


def test_syntax_error_has_position():
    with pytest.raises(ParseError) as err:
        parse_expression("x1++x2")
    assert "column 4" in str(err.value)
    with pytest.raises(ParseError):
        parse_expression("(x1+x2")
    with pytest.raises(ParseError, match="trailing"):
        parse_expression("x1 x2")
    with pytest.raises(ParseError):
        parse_expression("")


def test_vectorized_evaluation():
    e = parse_expression("x1*exp(-x2)")
    x1 = np.array([1.0, 2.0])
    x2 = np.array([0.0, 1.0])
    got = e.evaluate({"x1": x1, "x2": x2})
    np.testing.assert_allclose(got, x1 * np.exp(-x2), rtol=1e-15)


ROUND_TRIP_CORPUS = [
    "2/(y1*y2)",
    "x1+x2",
    "x1+x2+x3",
    "x1*x2*x3",
    "(1+t)^3*exp(-(x1+x2)*(1+t))",
    "(1+t)^4*exp(-(x1+x2+x3)*(1+t))",
    "exp(-t)*exp(-x1-x2)",
    "1/(y1*y2)",
    "4*x1*x2/(y1^2*y2^2)",
    "-x1^2",
    "(-x1)^2",
    "x1^-2",
    "x1^2^3",
    "(x1^2)^3",
    "x1-(x2-x3)",
    "x1-x2-x3",
    "x1/(x2*x3)",
    "x1/x2*x3",
    "--x1",
    "-(x1+x2)",
    "x1*-x2",
    "2^-t",
    "0.5*x1",
    "1e-09+x1",
    "2.5e3*t",
    "exp(x1)^2",
    "exp(exp(x1))",
    "t",
    "42",
    "3.14159",
    "x1+1",
    "1+x1",
    "(1+x1)*(1+x2)",
    "x1*x2+x3",
    "x1*(x2+x3)",
    "2*2*2",
    "x1^1",
    "x1^0",
    "0*x1",
    "y3/y2/y1",
    "exp(-(x1+x2))",
    "(x1+x2)/(y1+y2)",
    "1/(1+t)",
    "t^3+t^2+t+1",
    "-1",
    "-x1",
    "x1--x2",
    "exp(t)*exp(-t)",
    "1/2",
    "(x1+x2)^2",
]


@pytest.mark.parametrize("src", ROUND_TRIP_CORPUS)
def test_round_trip_corpus(src):
    e = parse_expression(src)
    printed = e.to_string()
    again = parse_expression(printed)
    assert again.tree == e.tree
    assert parse_expression(again.to_string()).tree == again.tree


@st.composite
def expr_trees(draw, depth=0):
    if depth >= 4:
        choice = draw(st.integers(0, 1))
    else:
        choice = draw(st.integers(0, 8))
    if choice == 0:
        v = draw(st.floats(min_value=0.0, max_value=1e3, allow_nan=False))
        return ("num", float(v))
    if choice == 1:
        name = draw(st.sampled_from(["x1", "x2", "x3", "y1", "y2", "y3", "t"]))
        return ("var", name)
    if choice == 2:
        return ("neg", draw(expr_trees(depth=depth + 1)))
    if choice == 3:
        return ("exp", draw(expr_trees(depth=depth + 1)))
    op = ["add", "sub", "mul", "div", "pow", "pow"][choice - 4]
    return (op, draw(expr_trees(depth=depth + 1)), draw(expr_trees(depth=depth + 1)))


@settings(max_examples=200, deadline=None)
@given(expr_trees())
def test_round_trip_random_trees(tree):
    e = KernelExpression(tree)
    printed = e.to_string()
    assert parse_expression(printed).tree == tree


def test_differentiation():
    e = parse_expression("(1+t)^3")
    d = e.diff("t")
    for t in (0.0, 0.5, 2.0):
        assert d.evaluate({"t": t}) == pytest.approx(3 * (1 + t) ** 2, rel=1e-14)

    e = parse_expression("exp(-(x1+x2)*(1+t))")
    d = e.diff("t")
    env = {"x1": 0.3, "x2": 0.4, "t": 1.5}
    expect = -(0.3 + 0.4) * math.exp(-(0.3 + 0.4) * 2.5)
    assert d.evaluate(env) == pytest.approx(expect, rel=1e-14)

    # quotient and chain rules against central differences
    e = parse_expression("x1^2*exp(-x1)/(1+x1)")
    d = e.diff("x1")
    h = 1e-6
    for x in (0.2, 1.0, 3.0):
        fd = (e.evaluate({"x1": x + h}) - e.evaluate({"x1": x - h})) / (2 * h)
        assert d.evaluate({"x1": x}) == pytest.approx(fd, rel=1e-8)


def test_differentiation_needs_constant_exponent():
    with pytest.raises(ValidationError):
        parse_expression("x1^t").diff("t")
    with pytest.raises(ValidationError):
        parse_expression("x1^2").diff("q")  # unknown direction


def test_substitution():
    gamma = parse_expression("x1+x2")
    gamma_y = gamma.subs({"x1": "y1", "x2": "y2"})
    assert gamma_y.evaluate({"y1": 2.0, "y2": 3.0}) == 5.0
    assert gamma.evaluate({"x1": 2.0, "x2": 3.0}) == 5.0

    e = parse_expression("t^2").subs({"t": parse_expression("x1+1")})
    assert e.evaluate({"x1": 1.0}) == 4.0


def test_free_identifiers():
    e = parse_expression("x1*exp(-x2*t)")
    assert e.free_identifiers() == {"x1", "x2", "t"}
    assert parse_expression("3").free_identifiers() == set()


def test_python_source_generation():
    e = parse_expression("(1+t)^3*exp(-(x1+x2)*(1+t))")
    src = e.to_python_source()
    fn = eval(f"lambda x1, x2, t: {src}", {"exp": math.exp})
    assert fn(0.0, 0.0, 1.0) == 8.0
    assert fn(0.5, 0.25, 0.0) == pytest.approx(math.exp(-0.75), rel=1e-15)


def test_missing_value_reported():
    with pytest.raises(ValidationError, match="x2"):
        parse_expression("x1+x2").evaluate({"x1": 1.0})
