"""A small, safe arithmetic language for coefficient tables in scenario files.

Expressions are Python-syntax arithmetic over the names ``t``, ``x``, ``y``,
``u`` (first coordinates) and ``x0, x1, ...``, ``y0, ...``, ``u0, ...`` with
``+ - * / **``, unary minus, numeric literals and the functions ``exp``,
``min``, ``max``, ``abs``. Anything else is rejected at parse time.
"""
from __future__ import annotations

import ast
import re

import numpy as np

from .errors import ParameterError

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}
_FUNCS = {
    "exp": (np.exp, 1),
    "abs": (np.abs, 1),
    "min": (np.minimum, None),
    "max": (np.maximum, None),
}
_NAME = re.compile(r"^([txyu])(\d*)$")


class Expression:
    """Compiled expression; call with keyword arrays ``t, x, y, u`` (2-d for x, y, u)."""

    def __init__(self, source):
        self.source = str(source).strip()
        try:
            tree = ast.parse(self.source, mode="eval")
        except SyntaxError as exc:
            raise ParameterError(f"cannot parse expression {self.source!r}: {exc.msg}") from exc
        self._check(tree.body)
        self._tree = tree.body
        self.names = sorted({n.id for n in ast.walk(tree) if isinstance(n, ast.Name) and n.id not in _FUNCS})

    def _check(self, node):
        if isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ParameterError(f"operator {type(node.op).__name__} not allowed in {self.source!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise ParameterError(f"unary operator not allowed in {self.source!r}")
            self._check(node.operand)
        elif isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ParameterError(f"only numeric literals are allowed in {self.source!r}")
        elif isinstance(node, ast.Name):
            if not _NAME.match(node.id) or (node.id.startswith("t") and node.id != "t"):
                raise ParameterError(f"unknown name {node.id!r} in {self.source!r}")
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS or node.keywords:
                raise ParameterError(f"only exp, abs, min and max may be called in {self.source!r}")
            arity = _FUNCS[node.func.id][1]
            if (arity is not None and len(node.args) != arity) or (arity is None and len(node.args) < 2):
                raise ParameterError(f"wrong number of arguments to {node.func.id} in {self.source!r}")
            for a in node.args:
                self._check(a)
        else:
            raise ParameterError(f"construct {type(node).__name__} not allowed in {self.source!r}")

    def __call__(self, t=0.0, x=None, y=None, u=None, n=None):
        env = {"t": t, "x": x, "y": y, "u": u}
        out = self._eval(self._tree, env)
        if n is not None:
            out = np.broadcast_to(np.asarray(out, dtype=np.float64), (n,))
        return out

    def _eval(self, node, env):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            val = self._eval(node.operand, env)
            return -val if isinstance(node.op, ast.USub) else val
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            base, idx = _NAME.match(node.id).groups()
            val = env[base]
            if base == "t":
                if idx:
                    raise ParameterError("t has no coordinates")
                return val
            if val is None:
                raise ParameterError(f"{base!r} is not available here (expression {self.source!r})")
            j = int(idx) if idx else 0
            if j >= val.shape[1]:
                raise ParameterError(f"{node.id!r} exceeds the dimension of {base} ({val.shape[1]})")
            return val[:, j]
        fn, _ = _FUNCS[node.func.id]
        args = [self._eval(a, env) for a in node.args]
        if node.func.id in ("min", "max"):
            acc = args[0]
            for a in args[1:]:
                acc = fn(acc, a)
            return acc
        return fn(*args)

    def __repr__(self):
        return f"Expression({self.source!r})"


def _table(spec, rows, cols=None):
    """Normalise a scalar / list / nested-list spec into a grid of Expressions."""
    if cols is None:
        items = spec if isinstance(spec, (list, tuple)) else [spec]
        if len(items) != rows:
            raise ParameterError(f"expected {rows} expressions, got {len(items)}")
        return [Expression(s) for s in items]
    if not isinstance(spec, (list, tuple)):
        if rows * cols != 1:
            raise ParameterError(f"expected a {rows}x{cols} table of expressions")
        return [[Expression(spec)]]
    if rows * cols == len(spec) and not any(isinstance(s, (list, tuple)) for s in spec):
        flat = [Expression(s) for s in spec]
        return [flat[r * cols:(r + 1) * cols] for r in range(rows)]
    if len(spec) != rows or any(len(r) != cols for r in spec):
        raise ParameterError(f"expected a {rows}x{cols} table of expressions")
    return [[Expression(s) for s in r] for r in spec]


def vector_callback(spec, rows, with_state=True):
    exprs = _table(spec, rows)
    if with_state:
        def fn(t, x, y, u):
            n = x.shape[0]
            return np.stack([np.broadcast_to(e(t, x, y, u), (n,)) for e in exprs], axis=1)
    else:
        def fn(x):
            n = x.shape[0]
            return np.stack([np.broadcast_to(e(0.0, x, None, None), (n,)) for e in exprs], axis=1)
    return fn


def matrix_callback(spec, rows, cols):
    exprs = _table(spec, rows, cols)

    def fn(t, x, y, u):
        n = x.shape[0]
        out = np.empty((n, rows, cols))
        for r in range(rows):
            for s in range(cols):
                out[:, r, s] = exprs[r][s](t, x, y, u)
        return out

    return fn


def scalar_callback(spec, kind):
    e = Expression(spec)
    if kind == "running":
        return lambda t, x, y, u: e(t, x, y, u, n=x.shape[0])
    if kind == "terminal":
        return lambda x: e(0.0, x, None, None, n=x.shape[0])
    return lambda y: e(0.0, None, y, None, n=y.shape[0])


def uses_name(spec, prefix):
    """True when any expression in ``spec`` (nested lists allowed) references ``prefix``."""
    if isinstance(spec, (list, tuple)):
        return any(uses_name(s, prefix) for s in spec)
    return any(_NAME.match(nm).group(1) == prefix for nm in Expression(spec).names)
