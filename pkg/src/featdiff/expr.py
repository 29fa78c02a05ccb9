"""Postfix feature expressions: tokens, parsing, validation, evaluation.

A transformed feature is a postfix token sequence over raw-column symbols
``f1 .. fn`` and a fixed operator set, e.g. ``f1 f2 *``.  A feature set is an
ordered list of such chunks, serialized with ``, `` between chunks:
``f1 f2 *, f3 log, f4 f5 +``.

All operators are total after safe-guarding: evaluation of any valid
expression on finite input never produces NaN/Inf.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ExprError",
    "UnknownToken",
    "MalformedPostfix",
    "EmptyChunk",
    "IndexOutOfRange",
    "OperatorSpec",
    "OPERATORS",
    "OPERATOR_NAMES",
    "OPERATOR_SET_VERSION",
    "FeatureExpr",
    "FeatureSet",
    "parse",
    "serialize",
    "evaluate",
    "random_feature_set",
    "save_feature_sets",
    "load_feature_sets",
]


class ExprError(ValueError):
    """Base class for expression-engine errors."""


class UnknownToken(ExprError):
    pass


class MalformedPostfix(ExprError):
    pass


class EmptyChunk(ExprError):
    pass


class IndexOutOfRange(ExprError):
    pass


# Outputs of every operator are clipped to this magnitude so that chained
# operations on arbitrary finite inputs can never overflow to inf.
_CLIP = 1e100
_EPS = 1e-6


def _clip(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -_CLIP, _CLIP)


def _safe_div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    denom = np.where(b >= 0.0, np.maximum(np.abs(b), _EPS), -np.maximum(np.abs(b), _EPS))
    return _clip(a / denom)


@dataclass(frozen=True)
class OperatorSpec:
    name: str
    arity: int
    fn: Callable[..., np.ndarray]


OPERATORS: dict[str, OperatorSpec] = {
    "+": OperatorSpec("+", 2, lambda a, b: _clip(a + b)),
    "-": OperatorSpec("-", 2, lambda a, b: _clip(a - b)),
    "*": OperatorSpec("*", 2, lambda a, b: _clip(a * b)),
    "/": OperatorSpec("/", 2, _safe_div),
    "log": OperatorSpec("log", 1, lambda a: _clip(np.log(np.abs(a) + _EPS))),
    "sqrt": OperatorSpec("sqrt", 1, lambda a: np.sqrt(np.abs(a))),
    "square": OperatorSpec("square", 1, lambda a: _clip(np.square(a))),
    "reciprocal": OperatorSpec("reciprocal", 1, lambda a: _safe_div(np.ones_like(a), a)),
    "sin": OperatorSpec("sin", 1, np.sin),
    "cos": OperatorSpec("cos", 1, np.cos),
}

OPERATOR_NAMES: tuple[str, ...] = tuple(OPERATORS)
OPERATOR_SET_VERSION = "ops-v1"

_FEATURE_RE = re.compile(r"^f([1-9][0-9]*)$")


def _feature_index(token: str) -> int | None:
    m = _FEATURE_RE.match(token)
    return int(m.group(1)) if m else None


def _validate_tokens(tokens: Sequence[str], n_features: int) -> None:
    if not tokens:
        raise EmptyChunk("empty feature chunk")
    depth = 0
    for tok in tokens:
        idx = _feature_index(tok)
        if idx is not None:
            if idx > n_features:
                raise UnknownToken(f"feature {tok!r} out of range for n_features={n_features}")
            depth += 1
        elif tok in OPERATORS:
            arity = OPERATORS[tok].arity
            if depth < arity:
                raise MalformedPostfix(f"stack underflow at {tok!r} in {' '.join(tokens)}")
            depth -= arity - 1
        else:
            raise UnknownToken(f"unknown token {tok!r}")
    if depth != 1:
        raise MalformedPostfix(f"{depth} residual operands in {' '.join(tokens)}")


@dataclass(frozen=True)
class FeatureExpr:
    """One transformed feature as a validated postfix token tuple."""

    tokens: tuple[str, ...]

    @classmethod
    def from_tokens(cls, tokens: Iterable[str], n_features: int) -> "FeatureExpr":
        toks = tuple(tokens)
        _validate_tokens(toks, n_features)
        return cls(toks)

    def __str__(self) -> str:
        return " ".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def max_feature_index(self) -> int:
        return max((_feature_index(t) or 0) for t in self.tokens)


@dataclass(frozen=True)
class FeatureSet:
    """Ordered collection of feature chunks; the unit encoded and generated."""

    exprs: tuple[FeatureExpr, ...]

    def __post_init__(self):
        if not self.exprs:
            raise EmptyChunk("feature set must contain at least one chunk")

    @property
    def count(self) -> int:
        return len(self.exprs)

    def __str__(self) -> str:
        return serialize(self)


def parse(text: str, n_features: int) -> FeatureSet:
    """Parse a comma-separated list of postfix chunks into a FeatureSet."""
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    chunks = text.split(",")
    exprs = []
    for chunk in chunks:
        toks = chunk.split()
        if not toks:
            raise EmptyChunk(f"empty chunk in {text!r}")
        exprs.append(FeatureExpr.from_tokens(toks, n_features))
    return FeatureSet(tuple(exprs))


def serialize(fs: FeatureSet) -> str:
    """Canonical text form: one space between tokens, ', ' between chunks."""
    return ", ".join(str(e) for e in fs.exprs)


def evaluate(fs: FeatureSet, table: np.ndarray) -> np.ndarray:
    """Stack-machine evaluation of every chunk against a columnar table.

    Returns an (n_rows, T) matrix; column t is exprs[t] applied elementwise.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2:
        raise ValueError("table must be 2-D")
    n_rows, n_cols = table.shape
    out = np.empty((n_rows, fs.count), dtype=np.float64)
    for t, expr in enumerate(fs.exprs):
        stack: list[np.ndarray] = []
        for tok in expr.tokens:
            idx = _feature_index(tok)
            if idx is not None:
                if idx > n_cols:
                    raise IndexOutOfRange(f"{tok} exceeds table width {n_cols}")
                stack.append(table[:, idx - 1])
            else:
                spec = OPERATORS[tok]
                if spec.arity == 1:
                    stack.append(spec.fn(stack.pop()))
                else:
                    b = stack.pop()
                    a = stack.pop()
                    stack.append(spec.fn(a, b))
        if len(stack) != 1:
            raise MalformedPostfix(f"invalid chunk {expr}")
        out[:, t] = stack[0]
    return out


def _random_expr_tokens(rng: np.random.Generator, n_features: int, budget: int) -> list[str]:
    # Recursive tree generation; total token count never exceeds budget.
    if budget < 2 or rng.random() < 0.35:
        return [f"f{rng.integers(1, n_features + 1)}"]
    unary_ops = [o for o in OPERATOR_NAMES if OPERATORS[o].arity == 1]
    binary_ops = [o for o in OPERATOR_NAMES if OPERATORS[o].arity == 2]
    if budget < 3 or rng.random() < 0.4:
        op = unary_ops[rng.integers(len(unary_ops))]
        return _random_expr_tokens(rng, n_features, budget - 1) + [op]
    op = binary_ops[rng.integers(len(binary_ops))]
    left_budget = int(rng.integers(1, budget - 1))
    left = _random_expr_tokens(rng, n_features, left_budget)
    right = _random_expr_tokens(rng, n_features, budget - 1 - len(left))
    return left + right + [op]


def random_feature_set(
    rng: np.random.Generator, n_features: int, t_max: int, l_max: int
) -> FeatureSet:
    """Draw a valid random FeatureSet with T <= t_max and chunk length <= l_max."""
    if min(n_features, t_max, l_max) < 1:
        raise ValueError("bounds must be >= 1")
    t = int(rng.integers(1, t_max + 1))
    exprs = tuple(
        FeatureExpr.from_tokens(_random_expr_tokens(rng, n_features, l_max), n_features)
        for _ in range(t)
    )
    return FeatureSet(exprs)


def save_feature_sets(path, sets: Sequence[FeatureSet], n_features: int) -> None:
    """Persist feature sets one per line, with a sidecar header line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n_features={n_features} operators={OPERATOR_SET_VERSION}\n")
        for fs in sets:
            fh.write(serialize(fs) + "\n")


def load_feature_sets(path) -> tuple[list[FeatureSet], int]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        m = re.match(r"#\s*n_features=(\d+)\s+operators=(\S+)", header)
        if not m:
            raise ExprError(f"missing header line in {path}")
        if m.group(2) != OPERATOR_SET_VERSION:
            raise ExprError(f"operator-set version mismatch: {m.group(2)}")
        n_features = int(m.group(1))
        sets = [parse(line.strip(), n_features) for line in fh if line.strip()]
    return sets, n_features
