"""Reward assignment (RA) functions.

An RA function maps the discriminator logit ``x`` (an estimate of the log
density ratio between expert and policy occupancy) to the scalar reward used
for policy improvement. Functions are expression trees built from a small
set of guarded primitives, written in a safe DSL:

    expr   := expr ("+" | "-") term | term
    term   := term ("*" | "/") factor | factor
    factor := "-" factor | number | "x" | "(" expr ")" | call
    call   := unary "(" expr ")"
            | ("min" | "max") "(" expr "," expr ")"
            | "branch" "(" number "," expr "," expr ")"
    unary  := neg | exp | log | abs | tanh | sigmoid | softplus | gelu

``branch(t, a, b)`` evaluates ``a`` where ``x <= t`` and ``b`` elsewhere.
``l`` and ``logits`` are accepted as aliases of ``x``. A minus sign directly
in front of a number is part of the literal.

Evaluation is total: ``log`` clamps its argument to at least 1e-12, ``div``
clamps the magnitude of the denominator to at least 1e-12 keeping its sign,
``exp`` clamps its argument to at most 60, and any intermediate overflow is
replaced by the largest finite float. Guard activations are counted in a
``GuardStats`` object when one is passed in.
"""

from __future__ import annotations

import ast
import logging
import re
from dataclasses import dataclass
from dataclasses import field
from functools import lru_cache
from typing import Callable
from typing import Dict
from typing import Iterator
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np
from scipy.special import expit
from scipy.special import xlogy

from .exceptions import RAParseError
from .exceptions import RASizeError
from .exceptions import UnknownRAError

UNARY_OPS = ("neg", "exp", "log", "abs", "tanh", "sigmoid", "softplus", "gelu")
BINARY_OPS = ("add", "sub", "mul", "div", "min", "max")
VARIABLE_NAMES = ("x", "l", "logits")
SOURCES = ("builtin", "llm", "local_mutation", "user")

MAX_NODES = 128
MAX_DEPTH = 16
MAX_SOURCE_BYTES = 4096

LOG_FLOOR = 1e-12
DIV_FLOOR = 1e-12
EXP_CEIL = 60.0
FLOAT_MAX = float(np.finfo(np.float64).max)

# Reports
VALIDATION_GRID = np.linspace(-10.0, 10.0, 2001)
BOUNDEDNESS_PROBE = np.linspace(-1000.0, 1000.0, 20001)
BOUNDED_LIMIT = 100.0
MAX_REWARD_MAGNITUDE = 1e6

_INFIX = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
_AST_BINOPS = {ast.Add: "add", ast.Sub: "sub", ast.Mult: "mul", ast.Div: "div"}


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    pass


@dataclass(frozen=True)
class Unary:
    op: str
    child: "RAExpr"

    def __post_init__(self) -> None:
        if self.op not in UNARY_OPS:
            raise ValueError(f"Unknown unary operator: {self.op!r}")


@dataclass(frozen=True)
class Binary:
    op: str
    left: "RAExpr"
    right: "RAExpr"

    def __post_init__(self) -> None:
        if self.op not in BINARY_OPS:
            raise ValueError(f"Unknown binary operator: {self.op!r}")


@dataclass(frozen=True)
class Branch:
    threshold: float
    if_le: "RAExpr"
    if_gt: "RAExpr"


RAExpr = Union[Const, Var, Unary, Binary, Branch]


@dataclass(frozen=True)
class RAFunction:
    name: str
    expr: RAExpr
    source: str = "builtin"

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise ValueError(f"Unknown source {self.source!r}, expected one of {SOURCES}")

    @property
    def dsl(self) -> str:
        return serialize(self.expr)


@dataclass
class GuardStats:
    """Counts of elements where a guard replaced the raw arithmetic."""

    log: int = 0
    div: int = 0
    exp: int = 0
    overflow: int = 0

    @property
    def total(self) -> int:
        return self.log + self.div + self.exp + self.overflow


@dataclass
class ValidationReport:
    max_abs: float
    guard_activations: int
    bounded: bool
    monotone: bool
    node_count: int
    depth: int
    finite: bool = True
    problems: List[str] = field(default_factory=list)

    @property
    def within_limits(self) -> bool:
        return self.node_count <= MAX_NODES and self.depth <= MAX_DEPTH

    @property
    def ok(self) -> bool:
        return not self.problems


def children(expr: RAExpr) -> Tuple[RAExpr, ...]:
    if isinstance(expr, Unary):
        return (expr.child,)
    if isinstance(expr, Binary):
        return (expr.left, expr.right)
    if isinstance(expr, Branch):
        return (expr.if_le, expr.if_gt)
    return ()


def iter_nodes(expr: RAExpr) -> Iterator[RAExpr]:
    """Pre-order traversal."""
    yield expr
    for child in children(expr):
        yield from iter_nodes(child)


def node_count(expr: RAExpr) -> int:
    return sum(1 for _ in iter_nodes(expr))


def depth(expr: RAExpr) -> int:
    kids = children(expr)
    if not kids:
        return 1
    return 1 + max(depth(child) for child in kids)


def with_children(expr: RAExpr, kids: Tuple[RAExpr, ...]) -> RAExpr:
    """Copy of `expr` with its children replaced."""
    if isinstance(expr, Unary):
        return Unary(expr.op, kids[0])
    if isinstance(expr, Binary):
        return Binary(expr.op, kids[0], kids[1])
    if isinstance(expr, Branch):
        return Branch(expr.threshold, kids[0], kids[1])
    return expr


def replace_node(expr: RAExpr, index: int, new: RAExpr) -> RAExpr:
    """Replace the node at pre-order position `index` with `new`."""
    if index < 0:
        raise IndexError(index)

    def _replace(node: RAExpr, i: int) -> Tuple[RAExpr, int]:
        # Returns (new node, number of pre-order positions consumed)
        if i == 0:
            return new, node_count(node)
        consumed = 1
        kids = []
        for child in children(node):
            size = node_count(child)
            if 0 <= i - consumed < size:
                child, _ = _replace(child, i - consumed)
            kids.append(child)
            consumed += size
        return with_children(node, tuple(kids)), consumed

    if index >= node_count(expr):
        raise IndexError(index)
    return _replace(expr, index)[0]


def check_limits(expr: RAExpr) -> None:
    count = node_count(expr)
    if count > MAX_NODES:
        raise RASizeError(f"Expression has {count} nodes, limit is {MAX_NODES}")
    d = depth(expr)
    if d > MAX_DEPTH:
        raise RASizeError(f"Expression has depth {d}, limit is {MAX_DEPTH}")


# Serialization


def _format_number(value: float) -> str:
    """Integers as such, everything else with 17 significant digits."""
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return format(value, ".17g")


def serialize(expr: RAExpr) -> str:
    """Canonical, fully parenthesized DSL text for `expr`."""
    if isinstance(expr, Const):
        return _format_number(expr.value)
    if isinstance(expr, Var):
        return "x"
    if isinstance(expr, Unary):
        return f"{expr.op}({serialize(expr.child)})"
    if isinstance(expr, Binary):
        left, right = serialize(expr.left), serialize(expr.right)
        if expr.op in _INFIX:
            return f"({left} {_INFIX[expr.op]} {right})"
        return f"{expr.op}({left}, {right})"
    if isinstance(expr, Branch):
        return (
            f"branch({_format_number(expr.threshold)}, "
            f"{serialize(expr.if_le)}, {serialize(expr.if_gt)})"
        )
    raise TypeError(f"Not an RA expression: {expr!r}")


# Parsing


def _numeric_constant(node: ast.AST) -> Optional[float]:
    """Value of a (possibly negated) numeric literal, else None."""
    sign = 1.0
    while isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        if isinstance(node.op, ast.USub):
            sign = -sign
        node = node.operand
    if (
        isinstance(node, ast.Constant)
        and isinstance(node.value, (int, float))
        and not isinstance(node.value, bool)
    ):
        return sign * float(node.value)
    return None


class _Converter:
    def __init__(self, line_offsets: List[int], lead: int) -> None:
        self.line_offsets = line_offsets
        self.lead = lead

    def offset(self, node: ast.AST) -> int:
        lineno = getattr(node, "lineno", 1)
        col = getattr(node, "col_offset", 0)  # already in UTF-8 bytes
        return self.lead + self.line_offsets[lineno - 1] + col

    def fail(self, node: ast.AST, message: str) -> RAParseError:
        return RAParseError(message, self.offset(node))

    def convert(self, node: ast.AST, level: int = 1) -> RAExpr:
        if level > MAX_DEPTH:
            raise RASizeError(f"Expression depth exceeds {MAX_DEPTH}")

        if isinstance(node, ast.Expression):
            return self.convert(node.body, level)

        if isinstance(node, ast.Constant):
            value = _numeric_constant(node)
            if value is None or not np.isfinite(value):
                raise self.fail(node, f"Unsupported literal {node.value!r}")
            return Const(value)

        if isinstance(node, ast.Name):
            if node.id in VARIABLE_NAMES:
                return Var()
            raise self.fail(node, f"Unknown name {node.id!r}")

        if isinstance(node, ast.UnaryOp):
            if isinstance(node.op, ast.UAdd):
                return self.convert(node.operand, level)
            if isinstance(node.op, ast.USub):
                value = _numeric_constant(node)
                if (
                    value is not None
                    and isinstance(node.operand, ast.Constant)
                    and np.isfinite(value)
                ):
                    return Const(value)
                return Unary("neg", self.convert(node.operand, level + 1))
            raise self.fail(node, f"Unsupported operator {type(node.op).__name__}")

        if isinstance(node, ast.BinOp):
            op = _AST_BINOPS.get(type(node.op))
            if op is None:
                raise self.fail(node, f"Unsupported operator {type(node.op).__name__}")
            return Binary(
                op,
                self.convert(node.left, level + 1),
                self.convert(node.right, level + 1),
            )

        if isinstance(node, ast.Call):
            return self.convert_call(node, level)

        raise self.fail(node, f"Unsupported syntax {type(node).__name__}")

    def convert_call(self, node: ast.Call, level: int) -> RAExpr:
        if not isinstance(node.func, ast.Name):
            raise self.fail(node, "Only plain function names can be called")
        if node.keywords:
            raise self.fail(node, "Keyword arguments are not supported")
        name, args = node.func.id, node.args
        if name in UNARY_OPS:
            if len(args) != 1:
                raise self.fail(node, f"{name}() takes exactly 1 argument")
            return Unary(name, self.convert(args[0], level + 1))
        if name in ("min", "max"):
            if len(args) != 2:
                raise self.fail(node, f"{name}() takes exactly 2 arguments")
            return Binary(
                name,
                self.convert(args[0], level + 1),
                self.convert(args[1], level + 1),
            )
        if name == "branch":
            if len(args) != 3:
                raise self.fail(node, "branch() takes exactly 3 arguments")
            threshold = _numeric_constant(args[0])
            if threshold is None or not np.isfinite(threshold):
                raise self.fail(args[0], "branch() threshold must be a number")
            return Branch(
                threshold,
                self.convert(args[1], level + 1),
                self.convert(args[2], level + 1),
            )
        raise self.fail(node, f"Unknown function {name!r}")


def parse(text: str) -> RAExpr:
    """Parse DSL text into an expression tree."""
    raw = text.encode("utf-8")
    if len(raw) > MAX_SOURCE_BYTES:
        raise RASizeError(f"Source is {len(raw)} bytes, limit is {MAX_SOURCE_BYTES}")

    # Same-width substitution keeps byte offsets valid
    normalized = re.sub(r"[\t\r\n\f\v]", " ", text)
    stripped = normalized.lstrip(" ")
    lead = len(normalized.encode("utf-8")) - len(stripped.encode("utf-8"))
    if not stripped.strip():
        raise RAParseError("Empty expression", 0)

    try:
        tree = ast.parse(stripped, mode="eval")
    except SyntaxError as e:
        col = max((e.offset or 1) - 1, 0)
        line = stripped.splitlines()[0] if stripped else ""
        offset = lead + len(line[:col].encode("utf-8"))
        raise RAParseError(f"Syntax error: {e.msg}", offset) from e
    except (RecursionError, MemoryError, ValueError) as e:
        raise RAParseError(f"Unparseable expression: {e}", lead) from e

    expr = _Converter([0], lead).convert(tree)
    check_limits(expr)
    return expr


# Evaluation


def _finite(values: np.ndarray, stats: GuardStats) -> np.ndarray:
    bad = ~np.isfinite(values)
    if bad.any():
        stats.overflow += int(bad.sum())
        values = np.nan_to_num(values, nan=0.0, posinf=FLOAT_MAX, neginf=-FLOAT_MAX)
    return values


def softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def gelu(x: np.ndarray) -> np.ndarray:
    inner = np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


_SIMPLE_UNARY: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "neg": np.negative,
    "abs": np.abs,
    "tanh": np.tanh,
    "sigmoid": expit,
    "softplus": softplus,
    "gelu": gelu,
}


def _evaluate(expr: RAExpr, x: np.ndarray, stats: GuardStats) -> np.ndarray:
    if isinstance(expr, Const):
        return np.full(x.shape, expr.value, dtype=np.float64)
    if isinstance(expr, Var):
        return x

    if isinstance(expr, Unary):
        c = _evaluate(expr.child, x, stats)
        if expr.op == "exp":
            over = c > EXP_CEIL
            stats.exp += int(over.sum())
            out = np.exp(np.minimum(c, EXP_CEIL))
        elif expr.op == "log":
            under = c < LOG_FLOOR
            stats.log += int(under.sum())
            out = np.log(np.maximum(c, LOG_FLOOR))
        else:
            out = _SIMPLE_UNARY[expr.op](c)
        return _finite(out, stats)

    if isinstance(expr, Binary):
        a = _evaluate(expr.left, x, stats)
        b = _evaluate(expr.right, x, stats)
        if expr.op == "add":
            out = a + b
        elif expr.op == "sub":
            out = a - b
        elif expr.op == "mul":
            out = a * b
        elif expr.op == "div":
            small = np.abs(b) < DIV_FLOOR
            stats.div += int(small.sum())
            out = a / np.where(small, np.copysign(DIV_FLOOR, b), b)
        elif expr.op == "min":
            out = np.minimum(a, b)
        else:
            out = np.maximum(a, b)
        return _finite(out, stats)

    if isinstance(expr, Branch):
        low = _evaluate(expr.if_le, x, stats)
        high = _evaluate(expr.if_gt, x, stats)
        return np.where(x <= expr.threshold, low, high)

    raise TypeError(f"Not an RA expression: {expr!r}")


def evaluate(
    expr: RAExpr, logits: np.ndarray, stats: Optional[GuardStats] = None
) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if stats is None:
        stats = GuardStats()
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = _finite(np.array(_evaluate(expr, x, stats), dtype=np.float64), stats)
    return out


def eval_ra(
    f: RAFunction, logits: np.ndarray, stats: Optional[GuardStats] = None
) -> np.ndarray:
    """Elementwise reward for each logit. Output has the shape of the input."""
    local = GuardStats()
    out = evaluate(f.expr, logits, local)
    if local.total:
        logging.debug(
            "RA function '%s' activated guards: log=%d div=%d exp=%d overflow=%d",
            f.name,
            local.log,
            local.div,
            local.exp,
            local.overflow,
        )
    if stats is not None:
        stats.log += local.log
        stats.div += local.div
        stats.exp += local.exp
        stats.overflow += local.overflow
    return out


def validate(expr: RAExpr) -> ValidationReport:
    stats = GuardStats()
    values = evaluate(expr, VALIDATION_GRID, stats)
    wide = evaluate(expr, BOUNDEDNESS_PROBE)

    max_abs = float(np.max(np.abs(values)))
    diffs = np.diff(values)
    tol = 1e-12
    monotone = bool(np.all(diffs >= -tol) or np.all(diffs <= tol))
    bounded = bool(max(max_abs, float(np.max(np.abs(wide)))) <= BOUNDED_LIMIT)
    report = ValidationReport(
        max_abs=max_abs,
        guard_activations=stats.total,
        bounded=bounded,
        monotone=monotone,
        node_count=node_count(expr),
        depth=depth(expr),
        finite=bool(np.all(np.isfinite(values))),
    )
    if not report.within_limits:
        report.problems.append(
            f"size {report.node_count} nodes / depth {report.depth} exceeds limits"
        )
    if not report.finite:
        report.problems.append("non-finite values on validation grid")
    if max_abs > MAX_REWARD_MAGNITUDE:
        report.problems.append(
            f"max |reward| {max_abs:.3g} exceeds {MAX_REWARD_MAGNITUDE:.0e}"
        )
    return report


# Builtins

BUILTIN_SOURCES = {
    "gail": "softplus(x)",
    "airl": "x",
    "fairl": "-x * exp(x)",
    "gail_heuristic": "-softplus(-x)",
    "dail": "0.5*sigmoid(x)*(tanh(x)+1)",
    "sigmoid_only": "sigmoid(x)",
    "half_tanh": "0.5*(tanh(x)+1)",
    "top2": (
        "min(1.5, max(0, branch(-0.8,"
        " 0.5 + 0.8*x - softplus(1.5*(-x - 0.8))/1.5,"
        # Largest double below 0.8, so x >= 0.8 takes the upper tail
        " branch(0.7999999999999999,"
        " 0.5 + 0.8*x,"
        " 0.5 + 0.8*0.8 + softplus(1.5*(x - 0.8))/1.5))))"
    ),
    "top3": "softplus(x)*sigmoid(1.5*x) + 0.5*gelu(x)",
    "top4": "x/(1 + abs(x)) * sigmoid(3*x) * 0.5 * (tanh(x) + 1)",
    "top5": "0.5*(x/(1 + abs(x)) + 1) * sigmoid(3*x)",
}
BASE_POPULATION = ("gail", "fairl", "airl", "gail_heuristic")


@lru_cache(maxsize=None)
def named_ra(name: str) -> RAFunction:
    try:
        source = BUILTIN_SOURCES[name]
    except KeyError:
        raise UnknownRAError(
            f"Unknown reward assignment function {name!r}. "
            f"Valid names: {', '.join(sorted(BUILTIN_SOURCES))}"
        ) from None
    return RAFunction(name=name, expr=parse(source), source="builtin")


def registry() -> Dict[str, RAFunction]:
    return {name: named_ra(name) for name in BUILTIN_SOURCES}


def resolve(text: str, name: Optional[str] = None) -> RAFunction:
    """Builtin by name, or a user function parsed from DSL text."""
    text = text.strip()
    if text in BUILTIN_SOURCES:
        return named_ra(text)
    if re.fullmatch(r"[A-Za-z_]\w*", text) and text not in VARIABLE_NAMES:
        # Looks like a name, not an expression
        named_ra(text)
    expr = parse(text)
    return RAFunction(name=name or serialize(expr), expr=expr, source="user")


def random_expr(
    rng: np.random.Generator, max_depth: int = 4, leaf_prob: float = 0.3
) -> RAExpr:
    """Random tree, used for mutation and round-trip checks."""
    if max_depth <= 1 or rng.random() < leaf_prob:
        if rng.random() < 0.5:
            return Var()
        return Const(float(rng.uniform(-2.0, 2.0)))
    kind = rng.integers(3)
    if kind == 0:
        op = UNARY_OPS[rng.integers(len(UNARY_OPS))]
        return Unary(op, random_expr(rng, max_depth - 1, leaf_prob))
    if kind == 1:
        op = BINARY_OPS[rng.integers(len(BINARY_OPS))]
        return Binary(
            op,
            random_expr(rng, max_depth - 1, leaf_prob),
            random_expr(rng, max_depth - 1, leaf_prob),
        )
    return Branch(
        float(rng.uniform(-2.0, 2.0)),
        random_expr(rng, max_depth - 1, leaf_prob),
        random_expr(rng, max_depth - 1, leaf_prob),
    )


# f-divergences behind the classical RA functions. For the non-variational
# forms the reward is -f(exp(x)).


def _forward_kl(u: np.ndarray) -> np.ndarray:
    return xlogy(u, u)


def _reverse_kl(u: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return -np.log(u)


def _jensen_shannon(u: np.ndarray) -> np.ndarray:
    return xlogy(u, u) - xlogy(1.0 + u, (1.0 + u) / 2.0)


def _gail_heuristic(u: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log1p(1.0 / u) - np.log(2.0)


F_DIVERGENCES: Dict[str, Tuple[str, Callable[[np.ndarray], np.ndarray]]] = {
    "fairl": ("forward_kl", _forward_kl),
    "airl": ("reverse_kl", _reverse_kl),
    "gail": ("jensen_shannon", _jensen_shannon),
    "gail_heuristic": ("unnamed", _gail_heuristic),
}


def f_divergence(kind: str, p: np.ndarray, q: np.ndarray) -> float:
    """D_f(P||Q) = E_Q[f(P/Q)] for discrete distributions with q > 0."""
    generators = {name: gen for name, gen in F_DIVERGENCES.values()}
    if kind not in generators:
        raise ValueError(
            f"Unknown divergence {kind!r}, expected one of {sorted(generators)}"
        )
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or np.any(q <= 0):
        raise ValueError("p and q must have equal shapes and q must be positive")
    return float(np.sum(q * generators[kind](p / q)))
