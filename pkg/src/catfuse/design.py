"""Categorical design matrices, coefficient containers and prediction.

Level codes are 1-based on the public surface (``levels[i, j]`` is in
``1..K_j``).  Coefficient blocks are plain numpy arrays where entry ``k - 1``
holds the coefficient of level ``k``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ActiveSet",
    "CategoricalDesign",
    "CoefficientFit",
    "FusionPattern",
    "PenaltyParams",
    "ResponseMatrix",
    "center_block",
    "encode_with_labels",
    "ingest_design",
    "predict",
    "read_table",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CategoricalDesign:
    """An ``n x p`` matrix of level codes plus per-column level metadata.

    Parameters
    ----------
    levels : ndarray of int, shape (n, p)
        1-based level codes.
    level_labels : sequence of sequences of str
        ``level_labels[j][k - 1]`` is the original label of level ``k`` of
        predictor ``j``.
    names : sequence of str, optional
        Predictor names, used in reports.
    """

    levels: np.ndarray
    level_labels: tuple
    names: tuple = ()
    level_counts: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        levels = np.array(self.levels, dtype=np.int64, copy=True)
        if levels.ndim != 2:
            raise ValueError("levels must be a 2-d array")
        n, p = levels.shape
        if n < 1 or p < 1:
            raise ValueError("design needs at least one row and one column")
        labels = tuple(tuple(str(s) for s in lab) for lab in self.level_labels)
        if len(labels) != p:
            raise ValueError(f"expected {p} label lists, got {len(labels)}")
        counts = []
        for j, lab in enumerate(labels):
            K = len(lab)
            if K < 1:
                raise ValueError(f"predictor {j} has no levels")
            if len(set(lab)) != K:
                raise ValueError(f"predictor {j} has duplicate level labels")
            col = levels[:, j]
            if col.min() < 1 or col.max() > K:
                raise ValueError(f"level codes of predictor {j} outside 1..{K}")
            counts.append(_frozen(np.bincount(col - 1, minlength=K).astype(np.int64)))
        names = tuple(self.names) if self.names else tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise ValueError("names must have one entry per predictor")
        object.__setattr__(self, "levels", _frozen(levels))
        object.__setattr__(self, "level_labels", labels)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "level_counts", tuple(counts))

    @property
    def n(self) -> int:
        return self.levels.shape[0]

    @property
    def p(self) -> int:
        return self.levels.shape[1]

    @property
    def n_levels(self) -> tuple:
        """Level count ``K_j`` per predictor."""
        return tuple(len(lab) for lab in self.level_labels)

    def codes(self, j: int) -> np.ndarray:
        """0-based level codes of predictor ``j`` (handy for indexing)."""
        return self.levels[:, j] - 1

    def decode(self) -> list:
        """Map level codes back to their labels, column by column."""
        return [[self.level_labels[j][c - 1] for c in self.levels[:, j]] for j in range(self.p)]

    def subset(self, rows) -> "CategoricalDesign":
        """Row subset that keeps the full level sets (empty levels allowed)."""
        return CategoricalDesign(self.levels[rows], self.level_labels, self.names)

    def zero_blocks(self) -> list:
        return [np.zeros(K) for K in self.n_levels]


@dataclass(frozen=True)
class ResponseMatrix:
    """``n x q`` real responses; column ``l`` is response ``y_l``."""

    values: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[1] < 1:
            raise ValueError("responses must be an (n, q) array with q >= 1")
        if not np.all(np.isfinite(v)):
            raise ValueError("responses must be finite")
        names = tuple(self.names) if self.names else tuple(f"y{l + 1}" for l in range(v.shape[1]))
        if len(names) != v.shape[1]:
            raise ValueError("names must have one entry per response")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "names", names)

    @property
    def q(self) -> int:
        return self.values.shape[1]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def column(self, l: int) -> np.ndarray:
        return self.values[:, l]


@dataclass(frozen=True)
class CoefficientFit:
    """Intercept plus one coefficient block per predictor for one response.

    ``converged``, ``n_sweeps`` and ``active`` are solver metadata; they do
    not take part in the linear algebra of :func:`predict`.
    """

    intercept: float
    blocks: tuple
    response_index: int = 0
    active: tuple = ()
    converged: bool = True
    n_sweeps: int = 0

    def __post_init__(self):
        blocks = tuple(_frozen(np.array(b, dtype=float, copy=True)) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "active", tuple(sorted(int(j) for j in self.active)))

    @property
    def coef(self) -> np.ndarray:
        """All blocks concatenated."""
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate(self.blocks)

    def nonzero_blocks(self) -> list:
        return [j for j, b in enumerate(self.blocks) if np.any(b != 0)]

    def scaled(self, a: float) -> "CoefficientFit":
        return CoefficientFit(a * self.intercept, [a * b for b in self.blocks], self.response_index)

    def __add__(self, other: "CoefficientFit") -> "CoefficientFit":
        if len(self.blocks) != len(other.blocks):
            raise ValueError("fits have different numbers of blocks")
        return CoefficientFit(
            self.intercept + other.intercept,
            [a + b for a, b in zip(self.blocks, other.blocks)],
            self.response_index,
        )


@dataclass(frozen=True)
class PenaltyParams:
    """Per-response, per-predictor MCP parameters, both of shape ``(q, p)``."""

    lam: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        lam = np.atleast_2d(np.array(self.lam, dtype=float, copy=True))
        gamma = np.atleast_2d(np.array(self.gamma, dtype=float, copy=True))
        if lam.shape != gamma.shape:
            raise ValueError(f"lambda shape {lam.shape} != gamma shape {gamma.shape}")
        if not np.all(np.isfinite(lam)) or np.any(lam < 0):
            raise ValueError("lambda entries must be finite and nonnegative")
        if not np.all(gamma > 0) or not np.all(np.isfinite(gamma)):
            raise ValueError("gamma entries must be finite and strictly positive")
        object.__setattr__(self, "lam", _frozen(lam))
        object.__setattr__(self, "gamma", _frozen(gamma))

    @classmethod
    def constant(cls, q: int, p: int, lam: float, gamma: float = 8.0) -> "PenaltyParams":
        return cls(np.full((q, p), float(lam)), np.full((q, p), float(gamma)))

    @classmethod
    def scaled(cls, design: CategoricalDesign, q: int, lam, gamma: float = 8.0) -> "PenaltyParams":
        """``lam[l] * sqrt(log K_j / n)`` for every predictor ``j``.

        ``lam`` is a scalar or a length-``q`` sequence of multipliers.
        """
        mult = np.broadcast_to(np.asarray(lam, dtype=float), (q,))
        scale = lambda_scale(design)
        return cls(mult[:, None] * scale[None, :], np.full((q, design.p), float(gamma)))

    @property
    def q(self) -> int:
        return self.lam.shape[0]

    @property
    def p(self) -> int:
        return self.lam.shape[1]


def lambda_scale(design: CategoricalDesign, n: int | None = None) -> np.ndarray:
    """Per-predictor tuning scale ``sqrt(log K_j / n)``."""
    n = design.n if n is None else n
    return np.sqrt(np.log(np.asarray(design.n_levels, dtype=float)) / n)


@dataclass(frozen=True)
class ActiveSet:
    """Sorted, duplicate-free set of 0-based predictor indices."""

    members: tuple = ()

    def __post_init__(self):
        members = tuple(sorted({int(j) for j in self.members}))
        if members and members[0] < 0:
            raise ValueError("predictor indices must be nonnegative")
        object.__setattr__(self, "members", members)

    @classmethod
    def universal(cls, p: int) -> "ActiveSet":
        return cls(range(p))

    def validate(self, p: int) -> None:
        if self.members and self.members[-1] >= p:
            raise ValueError(f"active index {self.members[-1]} out of range for p={p}")

    def __contains__(self, j) -> bool:
        return j in self.members

    def __iter__(self):
        return iter(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def issubset(self, other: "ActiveSet") -> bool:
        return set(self.members) <= set(other.members)

    def as_list(self, one_based: bool = False) -> list:
        return [j + 1 for j in self.members] if one_based else list(self.members)


@dataclass(frozen=True)
class FusionPattern:
    """Per-block partition of levels into groups that share one coefficient.

    ``labels[j]`` is an integer array of length ``K_j``; levels with the
    same label are fused.  Labels are renumbered to ``0..G_j - 1`` in order
    of first appearance.
    """

    labels: tuple

    def __post_init__(self):
        out = []
        for lab in self.labels:
            lab = np.asarray(lab)
            _, first, inv = np.unique(lab, return_index=True, return_inverse=True)
            order = np.argsort(np.argsort(first))
            out.append(_frozen(order[inv].astype(np.int64)))
        object.__setattr__(self, "labels", tuple(out))

    @classmethod
    def from_blocks(cls, blocks: Iterable[np.ndarray]) -> "FusionPattern":
        """Group levels by exact equality of their coefficient values."""
        return cls([np.unique(np.asarray(b), return_inverse=True)[1] for b in blocks])

    @classmethod
    def singletons(cls, n_levels: Sequence[int]) -> "FusionPattern":
        return cls([np.arange(K) for K in n_levels])

    def n_groups(self, j: int) -> int:
        return int(self.labels[j].max()) + 1

    def groups(self, j: int) -> list:
        lab = self.labels[j]
        return [np.flatnonzero(lab == g) for g in range(self.n_groups(j))]


def predict(design: CategoricalDesign, fit: CoefficientFit) -> np.ndarray:
    """Fitted values ``mu + sum_j theta_j[x_ij]``."""
    if len(fit.blocks) != design.p:
        raise ValueError(f"fit has {len(fit.blocks)} blocks, design has {design.p} predictors")
    out = np.full(design.n, fit.intercept)
    for j, (b, K) in enumerate(zip(fit.blocks, design.n_levels)):
        if b.shape != (K,):
            raise ValueError(f"block {j} has shape {b.shape}, expected ({K},)")
        out += b[design.codes(j)]
    return out


def center_block(raw, counts) -> tuple:
    """Remove the count-weighted mean from a coefficient block.

    Levels with zero count are pinned to 0 and ignored in the mean.  A block
    that is constant over its observed levels centers to exact zeros.

    Returns
    -------
    centered : ndarray
    shift : float
    """
    raw = np.asarray(raw, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if raw.shape != counts.shape:
        raise ValueError("raw and counts must have the same shape")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    pos = counts > 0
    if not np.any(pos):
        raise ValueError("all counts are zero")
    vals = raw[pos]
    out = np.zeros_like(raw)
    if np.all(vals == vals[0]):
        return out, float(vals[0])
    shift = float(np.dot(counts[pos], vals) / counts[pos].sum())
    out[pos] = vals - shift
    return out, shift


def encode_with_labels(column: Sequence[str], labels: Sequence[str]) -> tuple:
    """Encode ``column`` against a fixed label list.

    Returns 1-based codes and a mask of entries whose label is unknown (their
    code is set to 1 and must be treated specially by the caller).
    """
    index = {lab: k + 1 for k, lab in enumerate(labels)}
    codes = np.ones(len(column), dtype=np.int64)
    unseen = np.zeros(len(column), dtype=bool)
    for i, v in enumerate(column):
        c = index.get(v)
        if c is None:
            unseen[i] = True
        else:
            codes[i] = c
    return codes, unseen


def ingest_design(raw_table, names: Sequence[str] | None = None) -> CategoricalDesign:
    """Build a design from string-valued columns.

    ``raw_table`` is either a mapping ``name -> column`` or a sequence of
    columns.  Levels are numbered by lexicographic order of the distinct
    labels so the encoding does not depend on row order.
    """
    if isinstance(raw_table, Mapping):
        names = list(raw_table.keys()) if names is None else list(names)
        columns = [list(raw_table[k]) for k in names]
    else:
        columns = [list(c) for c in raw_table]
    if not columns:
        raise ValueError("raw table has no columns")
    n = len(columns[0])
    for j, col in enumerate(columns):
        if len(col) == 0:
            raise ValueError(f"column {j} is empty")
        if len(col) != n:
            raise ValueError(f"ragged table: column {j} has {len(col)} rows, expected {n}")
    levels = np.empty((n, len(columns)), dtype=np.int64)
    labels = []
    for j, col in enumerate(columns):
        col = [str(v) for v in col]
        lab = sorted(set(col))
        levels[:, j], _ = encode_with_labels(col, lab)
        labels.append(lab)
    return CategoricalDesign(levels, labels, tuple(names) if names else ())


def read_table(path, roles: Mapping[str, str]) -> tuple:
    """Read a headed CSV and split it by column role.

    ``roles`` maps column names to ``categorical``, ``response`` or
    ``ignore``; every header column must have a role.

    Returns
    -------
    categorical : dict of column name -> list of str
    responses : dict of column name -> list of str
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: file is empty, a header row is required") from None
        rows = list(reader)
    unknown = [c for c in roles if c not in header]
    if unknown:
        raise KeyError(f"unknown column(s) in config: {', '.join(unknown)}")
    missing = [c for c in header if c not in roles]
    if missing:
        raise ValueError(f"no role given for column(s): {', '.join(missing)}")
    bad = {r for r in roles.values()} - {"categorical", "response", "ignore"}
    if bad:
        raise ValueError(f"invalid role(s): {', '.join(sorted(bad))}")
    cat, resp = {}, {}
    for c_idx, name in enumerate(header):
        role = roles[name]
        if role == "ignore":
            continue
        col = []
        for r_idx, row in enumerate(rows, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: line {r_idx} has {len(row)} fields, expected {len(header)}")
            cell = row[c_idx]
            if cell.strip() == "":
                raise ValueError(f"{path}: missing value in column {name!r} at line {r_idx}")
            col.append(cell)
        (cat if role == "categorical" else resp)[name] = col
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return cat, resp
