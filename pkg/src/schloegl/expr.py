"""A small closed-form expression grammar in ``x`` and ``t``.

Accepted: numbers, the names ``x``, ``t``, ``pi``, ``e``, the operators
``+ - * / **`` and the functions ``sin, cos, tan, exp, log, sqrt, tanh,
sinh, cosh``. Expressions are parsed with :mod:`ast` (never evaluated) and
turned into sympy objects so they can be differentiated exactly.
"""
import ast

import numpy as np
import sympy as sp

from .errors import ConfigurationError

X, T = sp.symbols("x t", real=True)

_FUNCTIONS = {
    "sin": sp.sin,
    "cos": sp.cos,
    "tan": sp.tan,
    "exp": sp.exp,
    "log": sp.log,
    "sqrt": sp.sqrt,
    "tanh": sp.tanh,
    "sinh": sp.sinh,
    "cosh": sp.cosh,
}
_NAMES = {"x": X, "t": T, "pi": sp.pi, "e": sp.E}

_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a ** b,
}


def _build(node, source):
    if isinstance(node, ast.Expression):
        return _build(node.body, source)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        return sp.nsimplify(node.value) if isinstance(node.value, int) else sp.Float(node.value)
    if isinstance(node, ast.Name):
        if node.id in _NAMES:
            return _NAMES[node.id]
        raise ConfigurationError(f"unknown name {node.id!r} in expression {source!r}")
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_build(node.left, source), _build(node.right, source))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        val = _build(node.operand, source)
        return -val if isinstance(node.op, ast.USub) else val
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
            and node.func.id in _FUNCTIONS and len(node.args) == 1 and not node.keywords:
        return _FUNCTIONS[node.func.id](_build(node.args[0], source))
    raise ConfigurationError(f"unsupported construct {ast.dump(node)[:60]} in expression {source!r}")


def parse(source):
    """Parse ``source`` into a sympy expression in the symbols ``x`` and ``t``."""
    if isinstance(source, (int, float)):
        source = repr(float(source))
    try:
        tree = ast.parse(str(source).strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse expression {source!r}: {exc.msg}") from exc
    return _build(tree, source)


def to_function(expr):
    """Vectorized numpy callable ``f(t, x)`` broadcasting to the shape of ``x``."""
    fn = sp.lambdify((T, X), expr, modules="numpy")

    def evaluate(t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(fn(t, x), dtype=float), x.shape).copy()

    return evaluate
