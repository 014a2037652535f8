"""Split a semantic field into K contiguous slabs along its first principal
component of ``[position; feature]``."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidArgument, PersistenceError
from .semlift import SemanticField, orient_columns

DEFAULT_K = 8


@dataclass(frozen=True)
class LocalFieldSet:
    parts: tuple[SemanticField, ...]
    parent_indices: tuple[np.ndarray, ...]

    @property
    def k(self) -> int:
        return len(self.parts)

    @property
    def n(self) -> int:
        return int(sum(len(ix) for ix in self.parent_indices))

    def assignments(self) -> np.ndarray:
        out = np.empty(self.n, dtype=np.int64)
        for j, ix in enumerate(self.parent_indices):
            out[ix] = j
        return out

    def carry(self, fld: SemanticField) -> "LocalFieldSet":
        """Same index partition applied to another field over the same points."""
        if len(fld) != self.n:
            raise InvalidArgument(f"field has {len(fld)} points, partition covers {self.n}")
        return LocalFieldSet(tuple(fld.subset(ix) for ix in self.parent_indices),
                             self.parent_indices)

    @classmethod
    def from_assignments(cls, fld: SemanticField, assignments, k: int) -> "LocalFieldSet":
        a = np.asarray(assignments, dtype=np.int64)
        if a.shape != (len(fld),):
            raise InvalidArgument("one assignment per point required")
        idx = tuple(np.flatnonzero(a == j) for j in range(k))
        return cls(tuple(fld.subset(ix) for ix in idx), idx)


def standardize_blocks(fld: SemanticField) -> np.ndarray:
    """Centre position and feature blocks and scale each to unit mean per-dim variance.

    A block with zero variance is only centred.
    """
    blocks = []
    for b in (fld.points, fld.features):
        c = b - b.mean(axis=0)
        s = np.sqrt(np.mean(c.var(axis=0))) if b.shape[1] else 0.0
        blocks.append(c / s if s > 0 else c)
    return np.hstack(blocks)


def first_component(x: np.ndarray) -> np.ndarray:
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    return orient_columns(vt[:1].T)[:, 0]


def split_order(scores: np.ndarray, k: int) -> list[np.ndarray]:
    """Sort by score (ties by index) and cut into ``k`` near-equal runs."""
    order = np.argsort(scores, kind="stable")
    return np.array_split(order, k)


def partition_pca(fld: SemanticField, k: int = DEFAULT_K) -> LocalFieldSet:
    N = len(fld)
    if k < 1 or k > N:
        raise InvalidArgument(f"k must be in [1, {N}], got {k}")
    x = standardize_blocks(fld)
    scores = x @ first_component(x)
    groups = [np.sort(g) for g in split_order(scores, k)]
    return LocalFieldSet(tuple(fld.subset(g) for g in groups), tuple(groups))


def jaccard_matrix(a: LocalFieldSet, b: LocalFieldSet) -> np.ndarray:
    sa = [set(ix.tolist()) for ix in a.parent_indices]
    sb = [set(ix.tolist()) for ix in b.parent_indices]
    J = np.zeros((len(sa), len(sb)))
    for i, x in enumerate(sa):
        for j, y in enumerate(sb):
            u = len(x | y)
            J[i, j] = len(x & y) / u if u else 1.0
    return J


def partition_consistency_check(a: LocalFieldSet, b: LocalFieldSet) -> float:
    """Mean Jaccard overlap under the best matching of parts."""
    if a.n != b.n:
        raise InvalidArgument(f"partitions cover {a.n} and {b.n} points")
    J = jaccard_matrix(a, b)
    k = max(J.shape)
    if J.shape[0] != J.shape[1]:
        J = np.pad(J, ((0, k - J.shape[0]), (0, k - J.shape[1])))
    if k <= 8:
        cols = np.arange(k)
        best = max(J[cols, list(p)].sum() for p in itertools.permutations(range(k)))
    else:
        r, c = linear_sum_assignment(-J)
        best = J[r, c].sum()
    return float(best / k)


def save_partition(path, parts: LocalFieldSet) -> None:
    try:
        Path(path).write_text(json.dumps({"k": parts.k, "assignments": parts.assignments().tolist()}))
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc


def load_partition(path, fld: SemanticField) -> LocalFieldSet:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc
    return LocalFieldSet.from_assignments(fld, d["assignments"], int(d["k"]))
