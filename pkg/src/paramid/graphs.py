"""Boolean adjacency-matrix algebra for parameter-influence graphs.

Graphs are bipartite (outputs x parameters) unless square; entry (i, j) = 1
means parameter j is a parent of output i. The orientation is fixed across
the whole package to avoid transpose bugs.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AdjacencyMatrix",
    "GraphFamily",
    "CriterionResult",
    "GraphError",
    "CapacityError",
    "bool_matmul",
    "is_subset",
    "is_right_consistent",
    "admissible_support",
    "global_criterion",
    "local_criterion",
    "enumerate_right_consistent",
    "permutation_alignment",
]


class GraphError(ValueError):
    """Invalid graph input (dimension mismatch, non-boolean entries, ...)."""


class CapacityError(GraphError):
    """Brute-force enumeration was asked for more than it can handle."""


class AdjacencyMatrix:
    """Immutable boolean matrix over outputs (rows) x parameters (cols)."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise GraphError(f"adjacency matrix must be 2-d and non-empty, got shape {arr.shape}")
        if arr.dtype != np.bool_:
            if not np.isin(arr, (0, 1)).all():
                raise GraphError("adjacency entries must be 0 or 1")
            arr = arr.astype(bool)
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("AdjacencyMatrix is immutable")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @classmethod
    def identity(cls, n: int) -> "AdjacencyMatrix":
        return cls(np.eye(n, dtype=bool))

    @classmethod
    def ones(cls, rows: int, cols: int) -> "AdjacencyMatrix":
        return cls(np.ones((rows, cols), dtype=bool))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "AdjacencyMatrix":
        return cls(np.zeros((rows, cols), dtype=bool))

    def parents(self, output: int) -> frozenset[int]:
        """Parameter indices feeding the given output row."""
        return frozenset(np.flatnonzero(self.data[output]).tolist())

    def children(self, param: int) -> frozenset[int]:
        """Output indices fed by the given parameter column."""
        return frozenset(np.flatnonzero(self.data[:, param]).tolist())

    def __eq__(self, other) -> bool:
        if not isinstance(other, AdjacencyMatrix):
            return NotImplemented
        return self.data.shape == other.data.shape and bool((self.data == other.data).all())

    def __hash__(self) -> int:
        return hash((self.data.shape, self.data.tobytes()))

    def __repr__(self) -> str:
        body = ",".join("".join("1" if v else "0" for v in row) for row in self.data)
        return f"AdjacencyMatrix({self.rows}x{self.cols}:[{body}])"

    def to_json(self) -> str:
        return json.dumps(
            {"rows": self.rows, "cols": self.cols, "data": self.data.astype(int).tolist()}
        )

    @classmethod
    def from_json(cls, text: str) -> "AdjacencyMatrix":
        obj = json.loads(text)
        g = cls(obj["data"])
        if g.rows != obj["rows"] or g.cols != obj["cols"]:
            raise GraphError("graph JSON header does not match its data block")
        return g


@dataclass(frozen=True)
class GraphFamily:
    """Local causal graphs, one per state-space partition, uniform dimensions."""

    graphs: tuple[AdjacencyMatrix, ...]
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.graphs) == 0:
            raise GraphError("graph family must be non-empty")
        shape = self.graphs[0].data.shape
        if any(g.data.shape != shape for g in self.graphs):
            raise GraphError("graph family members must share dimensions")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(i) for i in range(len(self.graphs))))
        elif len(self.labels) != len(self.graphs):
            raise GraphError("one label per family member required")

    def __len__(self) -> int:
        return len(self.graphs)

    def union(self) -> AdjacencyMatrix:
        acc = np.zeros_like(self.graphs[0].data)
        for g in self.graphs:
            acc = acc | g.data
        return AdjacencyMatrix(acc)


@dataclass(frozen=True)
class CriterionResult:
    """Per-parameter verdict of a (global or local) graphical criterion."""

    passes: tuple[bool, ...]
    overall: bool
    support: tuple[frozenset[int], ...]
    unconstrained: tuple[bool, ...]  # childless in every graph considered

    def to_json(self) -> str:
        return json.dumps(
            {
                "overall": self.overall,
                "per_parameter": list(self.passes),
                "support": [sorted(s) for s in self.support],
                "unconstrained": list(self.unconstrained),
            }
        )


def _check_same_shape(a: AdjacencyMatrix, b: AdjacencyMatrix):
    if a.data.shape != b.data.shape:
        raise GraphError(f"dimension mismatch: {a.data.shape} vs {b.data.shape}")


def bool_matmul(a: AdjacencyMatrix, b: AdjacencyMatrix) -> AdjacencyMatrix:
    """Boolean matrix product: OR over k of (a[i,k] AND b[k,j])."""
    if a.cols != b.rows:
        raise GraphError(f"inner dimensions differ: {a.cols} vs {b.rows}")
    return AdjacencyMatrix(a.data @ b.data)  # bool matmul == OR of ANDs in numpy


def is_subset(a: AdjacencyMatrix, b: AdjacencyMatrix) -> bool:
    """a is a subgraph of b: every zero of b is a zero of a."""
    _check_same_shape(a, b)
    return bool((a.data <= b.data).all())


def is_right_consistent(g: AdjacencyMatrix, r: AdjacencyMatrix) -> bool:
    """True iff g stays invariant under right-multiplication by r (g == g*r)."""
    if r.rows != r.cols:
        raise GraphError("right factor must be square over parameters")
    if g.cols != r.rows:
        raise GraphError(f"dimension mismatch: g has {g.cols} columns, r is {r.rows}x{r.cols}")
    return bool_matmul(g, r) == g


def admissible_support(g: AdjacencyMatrix) -> tuple[frozenset[int], ...]:
    """Allowed column support of each parameter row in any right-consistent factor.

    Parameter i may reach exactly the parameters whose child set contains
    Ch(i): the intersection over a in Ch(i) of Pa(a). A childless parameter is
    unrestricted (full set).
    """
    everything = frozenset(range(g.cols))
    out = []
    for i in range(g.cols):
        children = g.children(i)
        if not children:
            out.append(everything)
            continue
        acc = everything
        for a in children:
            acc = acc & g.parents(a)
        out.append(acc)
    return tuple(out)


def _criterion_from_support(
    support: tuple[frozenset[int], ...], childless: tuple[bool, ...]
) -> CriterionResult:
    passes = tuple(
        (support[i] == frozenset((i,))) and not childless[i] for i in range(len(support))
    )
    return CriterionResult(
        passes=passes, overall=all(passes), support=support, unconstrained=childless
    )


def global_criterion(g: AdjacencyMatrix) -> CriterionResult:
    """Parameter i is identifiable iff its admissible support is exactly {i}."""
    support = admissible_support(g)
    childless = tuple(not g.children(i) for i in range(g.cols))
    return _criterion_from_support(support, childless)


def local_criterion(family: GraphFamily) -> CriterionResult:
    """Intersect admissible supports over all partition graphs.

    A parameter childless in one member contributes the full set for that
    member; childless in every member means the parameter never influences
    the system and is flagged unconstrained (criterion fails for it).
    """
    n = family.graphs[0].cols
    supports = [admissible_support(g) for g in family.graphs]
    merged = []
    for i in range(n):
        acc = frozenset(range(n))
        for sup in supports:
            acc = acc & sup[i]
        merged.append(acc)
    childless = tuple(all(not g.children(i) for g in family.graphs) for i in range(n))
    return _criterion_from_support(tuple(merged), childless)


_ENUMERATION_MAX_COLS = 5
_ENUMERATION_MAX_RESULTS = 2_000_000


def enumerate_right_consistent(g: AdjacencyMatrix) -> list[AdjacencyMatrix]:
    """Brute-force every square boolean r with g*r == g.

    Exhaustive over all 2^(n^2) candidates (n = g.cols), evaluated in chunks;
    this is the oracle the analytic support computation is checked against.
    """
    n = g.cols
    if n > _ENUMERATION_MAX_COLS:
        raise CapacityError(f"enumeration supports at most {_ENUMERATION_MAX_COLS} parameters, got {n}")
    total = 1 << (n * n)
    gd = g.data
    out = []
    chunk = 1 << 20
    bit_index = np.arange(n * n, dtype=np.uint64)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total), dtype=np.uint64)
        bits = (codes[:, None] >> bit_index[None, :]) & np.uint64(1)
        cands = bits.reshape(-1, n, n).astype(bool)
        prods = np.einsum("ik,ckj->cij", gd, cands) > 0
        ok = (prods == gd[None, :, :]).all(axis=(1, 2))
        hits = np.flatnonzero(ok)
        if len(out) + hits.size > _ENUMERATION_MAX_RESULTS:
            raise CapacityError("right-consistent set too large to materialise")
        out.extend(AdjacencyMatrix(cands[h]) for h in hits)
    return out


def support_union_of(matrices: list[AdjacencyMatrix]) -> tuple[frozenset[int], ...]:
    """Union of row supports over a list of square graphs (oracle reduction)."""
    if not matrices:
        raise GraphError("need at least one matrix")
    acc = np.zeros_like(matrices[0].data)
    for m in matrices:
        acc = acc | m.data
    return tuple(frozenset(np.flatnonzero(acc[i]).tolist()) for i in range(acc.shape[0]))


def _column_signatures(g: AdjacencyMatrix) -> list[bytes]:
    return [g.data[:, j].tobytes() for j in range(g.cols)]


def permutation_alignment(g1: AdjacencyMatrix, g2: AdjacencyMatrix):
    """Column permutation p with g2[:, p] == g1, or None.

    Columns with identical content are interchangeable, so matching reduces
    to per-signature assignment; picking the smallest unused source index at
    each position yields the lexicographically smallest permutation.
    """
    _check_same_shape(g1, g2)
    sig1 = _column_signatures(g1)
    sig2 = _column_signatures(g2)
    pool: dict[bytes, list[int]] = {}
    for j, s in enumerate(sig2):
        pool.setdefault(s, []).append(j)
    from collections import Counter

    if Counter(sig1) != Counter(sig2):
        return None
    perm = []
    for s in sig1:
        perm.append(pool[s].pop(0))  # pool lists are ascending
    return tuple(perm)


def all_square_graphs(n: int):
    """Iterate every n x n boolean matrix (test helper, tiny n only)."""
    for bits in itertools.product((False, True), repeat=n * n):
        yield AdjacencyMatrix(np.array(bits, dtype=bool).reshape(n, n))
