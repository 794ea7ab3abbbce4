import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from loccontrol.expr import ExpressionError, parse_expression


@pytest.mark.parametrize(
    "text, env, expected",
    [
        ("1 + 2*3", {}, 7.0),
        ("-2^2", {}, -4.0),
        ("2^3^2", {}, 512.0),
        ("(x1 - 1) * u1", {"x1": 3.0, "u1": 2.0}, 4.0),
        ("sin(t)^2 + cos(t)^2", {"t": 0.7}, 1.0),
        ("sqrt(abs(-9)) + exp(0) + log(1)", {}, 4.0),
        ("1.5e-1 * 10", {}, 1.5),
    ],
)
def test_values(text, env, expected):
    assert parse_expression(text)(**env) == pytest.approx(expected)


def test_vectorised():
    e = parse_expression("u1^2 - x1^2")
    out = e(u1=np.array([1.0, 2.0]), x1=np.array([0.5, 1.0]))
    np.testing.assert_allclose(out, [0.75, 3.0])


def test_error_offset():
    with pytest.raises(ExpressionError) as info:
        parse_expression("u1 +* x1")
    assert info.value.offset == 4


@pytest.mark.parametrize("text", ["", "1 +", "(1", "foo(2)", "2 $ 3", "1 2"])
def test_rejects(text):
    with pytest.raises(ExpressionError):
        parse_expression(text)


def test_unknown_name():
    with pytest.raises(ExpressionError):
        parse_expression("x1 + y", allowed={"x1"})
    assert parse_expression("x1 + T", allowed={"x1", "T"}).names == {"x1", "T"}


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_matches_python(a, b):
    e = parse_expression("a*b - (a + b)/3 + a^2")
    assert e(a=a, b=b) == pytest.approx(a * b - (a + b) / 3 + a**2, rel=1e-12, abs=1e-9)


def test_missing_variable():
    with pytest.raises(ExpressionError):
        parse_expression("x1 + 1")()
    assert math.isclose(parse_expression("x1 + 1")(x1=1.0), 2.0)
