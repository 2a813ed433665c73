import numpy as np
import pytest
import sympy as sp

from schloegl import expr
from schloegl.errors import ConfigurationError


def test_initial_error_expression():
    f = expr.to_function(expr.parse("-4+8*cos(2*pi*x**2)"))
    np.testing.assert_allclose(f(0.0, np.array([0.0, 0.5, 1.0])),
                               [4.0, -4 + 8 * np.cos(np.pi / 2), 4.0], atol=1e-14)


def test_time_dependence_and_broadcast():
    f = expr.to_function(expr.parse("sin(3*t)"))
    out = f(0.5, np.zeros(4))
    assert out.shape == (4,)
    np.testing.assert_allclose(out, np.sin(1.5))


def test_derivative_is_exact():
    e = expr.parse("exp(-t)*cos(pi*x)")
    assert sp.simplify(sp.diff(e, expr.X, 2) + sp.pi ** 2 * e) == 0


@pytest.mark.parametrize("source", ["__import__('os')", "x.real", "foo(x)", "y + 1", "x if t else 0",
                                    "sin(x, t)", "[x]", "1 +", "True"])
def test_rejects_unsupported_input(source):
    with pytest.raises(ConfigurationError):
        expr.parse(source)


def test_numbers_accepted():
    assert float(expr.parse(2.5)) == 2.5
    assert float(expr.parse("1e-3")) == pytest.approx(1e-3)
