"""
Scalar fields over (x, y, t) and the small arithmetic language used by experiment files.

Expressions are parsed with `ast` and evaluated by walking the tree with numpy, so only the
whitelisted names and functions below are reachable.
"""
from __future__ import annotations
import ast
import math
import operator
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Union

import numpy as np

from srcid.errors import ConfigError, CoefficientError

Number = Union[int, float]
FieldLike = Union["ScalarField", Number, str, Callable[..., Any]]


def _disc(x, y, cx, cy, r):
    """Indicator of the open disc of radius r around (cx, cy)."""
    return ((x - cx) ** 2 + (y - cy) ** 2 < r ** 2).astype(float)


def _heaviside(z):
    return np.heaviside(z, 0.0)


FUNCTIONS: Dict[str, Callable[..., Any]] = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "abs": np.abs,
    "min": np.minimum,
    "max": np.maximum,
    "heaviside": _heaviside,
    "disc": _disc,
}
CONSTANTS = {"pi": math.pi, "e": math.e}
VARIABLES = ("x", "y", "t")

_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNOPS = {ast.UAdd: operator.pos, ast.USub: operator.neg}


class ScalarExpression:
    """Compiled arithmetic expression over x, y, t."""

    def __init__(self, source: str):
        self.source = str(source).strip()
        if not self.source:
            raise ConfigError("empty expression")
        try:
            tree = ast.parse(self.source.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse expression {self.source!r}: {exc.msg}") from exc
        self._tree = tree.body
        self.names = set()
        self._check(self._tree)

    def _check(self, node: ast.AST) -> None:
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            self._check(node.operand)
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            pass
        elif isinstance(node, ast.Name):
            if node.id not in VARIABLES and node.id not in CONSTANTS:
                raise ConfigError(f"unknown name {node.id!r} in expression {self.source!r}")
            self.names.add(node.id)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS or node.keywords:
                raise ConfigError(f"unsupported call in expression {self.source!r}")
            for arg in node.args:
                self._check(arg)
        else:
            raise ConfigError(f"unsupported syntax {type(node).__name__} in expression {self.source!r}")

    @property
    def depends_on_time(self) -> bool:
        return "t" in self.names

    def _eval(self, node: ast.AST, env: Dict[str, Any]):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNOPS[type(node.op)](self._eval(node.operand, env))
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id] if node.id in env else CONSTANTS[node.id]
        return FUNCTIONS[node.func.id](*(self._eval(a, env) for a in node.args))

    def __call__(self, x, y, t=0.0):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        t = np.asarray(t, dtype=float)
        with np.errstate(all="ignore"):
            out = self._eval(self._tree, {"x": x, "y": y, "t": t})
        return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast(x, y, t).shape)

    def __repr__(self) -> str:
        return f"ScalarExpression({self.source!r})"


@dataclass(frozen=True, eq=False)
class ScalarField:
    """
    Vectorized scalar field f(x, y, t).

    steady     the field ignores t (one nodal interpolation serves every time level)
    slab_mean  optional exact time average (x, y, t0, t1) -> values, used by slab averaging
    """

    func: Callable[..., Any]
    steady: bool = False
    slab_mean: Optional[Callable[..., Any]] = None
    label: str = ""

    def __call__(self, x, y, t=0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast(x, y, np.asarray(t, dtype=float)).shape
        return np.array(np.broadcast_to(np.asarray(self.func(x, y, t), dtype=float), shape))

    @property
    def constant_value(self) -> Optional[float]:
        return getattr(self.func, "value", None)

    @classmethod
    def constant(cls, value: Number) -> "ScalarField":
        value = float(value)

        def const(x, y, t=0.0):
            return np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, value)

        const.value = value
        return cls(const, steady=True, label=repr(value))

    @classmethod
    def from_expression(cls, source: Union[str, ScalarExpression]) -> "ScalarField":
        expr = source if isinstance(source, ScalarExpression) else ScalarExpression(source)
        try:
            value = float(expr.source)
        except ValueError:
            return cls(expr, steady=not expr.depends_on_time, label=expr.source)
        return cls.constant(value)

    @classmethod
    def coerce(cls, value: FieldLike, *, steady: bool = False) -> "ScalarField":
        if isinstance(value, ScalarField):
            return value
        if isinstance(value, (int, float, np.floating, np.integer)) and not isinstance(value, bool):
            return cls.constant(float(value))
        if isinstance(value, (str, ScalarExpression)):
            return cls.from_expression(value)
        if callable(value):
            return cls(value, steady=steady, label=getattr(value, "__name__", "callable"))
        raise TypeError(f"cannot build a scalar field from {value!r}")

    def __repr__(self) -> str:
        return f"ScalarField({self.label or self.func!r})"


@dataclass(frozen=True, eq=False)
class MatrixField:
    """Symmetric 2x2 matrix field; evaluation returns shape (..., 2, 2)."""

    entries: tuple  # ((a11, a12), (a21, a22)) as ScalarField

    @classmethod
    def coerce(cls, value: Any) -> "MatrixField":
        if isinstance(value, MatrixField):
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [[value, 0.0], [0.0, value]]
        rows = [list(r) for r in value]
        if len(rows) != 2 or any(len(r) != 2 for r in rows):
            raise CoefficientError("diffusion matrix A must be 2x2")
        return cls(tuple(tuple(ScalarField.coerce(v) for v in r) for r in rows))

    @property
    def steady(self) -> bool:
        return all(f.steady for row in self.entries for f in row)

    def __call__(self, x, y, t=0.0) -> np.ndarray:
        vals = [[f(x, y, t) for f in row] for row in self.entries]
        out = np.stack([np.stack(vals[0], axis=-1), np.stack(vals[1], axis=-1)], axis=-2)
        return out


def sample_points(bounds: Sequence[float], n: int = 5) -> tuple:
    """Tensor grid of n x n points covering the closed rectangle."""
    x0, x1, y0, y1 = bounds
    X, Y = np.meshgrid(np.linspace(x0, x1, n), np.linspace(y0, y1, n))
    return X.ravel(), Y.ravel()


def check_evaluable(expr: ScalarExpression, bounds: Sequence[float], T: float = 1.0) -> None:
    """Raise ConfigError if `expr` is not finite on a sample of the space-time domain."""
    xs, ys = sample_points(bounds)
    for t in (0.0, 0.5 * T, T):
        vals = expr(xs, ys, t)
        if not np.all(np.isfinite(vals)):
            raise ConfigError(f"expression {expr.source!r} is not finite on the domain")
