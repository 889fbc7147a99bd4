"""Tiny expression language for problem files.

Grammar: numeric literals, + - * / ^ (power), unary minus, parentheses,
exp sin cos, and a fixed set of variable names.  Anything else is rejected.
"""
from __future__ import annotations

import ast

import numpy as np

from .errors import ConfigError

FUNCTIONS = {"exp": np.exp, "sin": np.sin, "cos": np.cos}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply, ast.Div: np.divide, ast.Pow: np.power}


class Expression:
    """A parsed expression; call it with keyword arrays for its variables."""

    def __init__(self, text: str, variables=("x1", "x2", "x3"), line: int = 0, column: int = 0):
        self.text = text
        self.variables = tuple(variables)
        self._line, self._col = line, column
        try:
            tree = ast.parse(text.replace("^", "**").strip(), mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse expression {text!r}: {exc.msg}", line, column + (exc.offset or 1) - 1)
        self._check(tree.body)
        self._tree = tree.body

    def _fail(self, node, msg):
        raise ConfigError(f"{msg} in expression {self.text!r}", self._line, self._col + getattr(node, "col_offset", 0))

    def _check(self, node):
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                self._fail(node, "only numeric literals are allowed")
        elif isinstance(node, ast.Name):
            if node.id not in self.variables:
                self._fail(node, f"unknown name {node.id!r}")
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                self._fail(node, "unsupported operator")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                self._fail(node, "unsupported unary operator")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
                self._fail(node, "unknown function")
            if len(node.args) != 1 or node.keywords:
                self._fail(node, "functions take exactly one argument")
            self._check(node.args[0])
        else:
            self._fail(node, f"{type(node).__name__} is not allowed")

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, env)
            return -v if isinstance(node.op, ast.USub) else v
        return FUNCTIONS[node.func.id](self._eval(node.args[0], env))

    def __call__(self, **env):
        missing = [v for v in self.variables if v not in env and v in self.names]
        if missing:
            raise KeyError(f"missing variables {missing}")
        with np.errstate(all="ignore"):
            return self._eval(self._tree, {k: np.asarray(v, dtype=float) for k, v in env.items()})

    @property
    def names(self) -> set:
        return {n.id for n in ast.walk(self._tree) if isinstance(n, ast.Name) and n.id not in FUNCTIONS}

    def at_points(self, points, **extra):
        """Evaluate with x1, x2, x3 taken from an (n, 3) array; broadcast to (n,)."""
        points = np.asarray(points, dtype=float)
        out = self(x1=points[:, 0], x2=points[:, 1], x3=points[:, 2], **extra)
        return np.broadcast_to(np.asarray(out, dtype=float), points.shape[:1]).copy()

    def __repr__(self):
        return f"Expression({self.text!r})"


def parse_expression(text: str, variables=("x1", "x2", "x3"), line: int = 0, column: int = 0) -> Expression:
    return Expression(text, variables, line, column)
