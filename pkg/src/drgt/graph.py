"""RBF similarity features and the unified drug/cell/gene adjacency.

Node order is drugs ``[0, n)``, cells ``[n, n+m)``, genes ``[n+m, n+m+l)``.
Edges are stored as directed ``(src, dst)`` pairs, always in both directions;
attention at ``dst`` is normalized over its incoming edges.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.spatial.distance import cdist

from .dataset import CLASSIFICATION, LabeledResponse, ProcessedDataset
from .tables import write_rows

DRUG, CELL, GENE = "drug", "cell", "gene"
DRUG_CELL, DRUG_GENE, CELL_GENE = "drug-cell", "drug-gene", "cell-gene"
KIND_CODES = {DRUG_CELL: 0, DRUG_GENE: 1, CELL_GENE: 2}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
SOFT_EDGE = 0.5


def rbf_similarity(X: np.ndarray) -> np.ndarray:
    """``exp(-gamma * ||x_i - x_j||^2)`` with ``gamma = 1 / n_columns``.

    Values are floored at the smallest positive normal float so entries stay in (0, 1].
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError(f"rbf_similarity needs at least one column, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("rbf_similarity input must be finite")
    d2 = cdist(X, X, metric="sqeuclidean")
    S = np.exp(-d2 / X.shape[1])
    np.fill_diagonal(S, 1.0)
    return np.maximum(S, np.finfo(np.float64).tiny)


@dataclass
class Features:
    drug: np.ndarray
    cell: np.ndarray
    gene: np.ndarray


def build_features(data: ProcessedDataset) -> Features:
    return Features(drug=rbf_similarity(data.fingerprints.bits),
                    cell=rbf_similarity(data.expression.values),
                    gene=rbf_similarity(data.expression.values.T))


@dataclass
class BlockEdges:
    """Edges of one off-diagonal block in local (row-entity, column-entity) indices."""

    row_type: str
    col_type: str
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.rows)

    def transpose(self) -> "BlockEdges":
        return BlockEdges(self.col_type, self.row_type, self.cols, self.rows, self.weights)

    @classmethod
    def empty(cls, row_type: str, col_type: str) -> "BlockEdges":
        return cls(row_type, col_type, [], [], [])


@dataclass
class GraphOptions:
    dg_zero_padding: bool = True  # keep unknown drug-gene pairs as weight-0 edges
    dc_zero_edges: bool = False  # keep resistant (label 0) training pairs as weight-0 edges
    scale_regression: bool = True
    std_ddof: int = 0


def build_dc(labels: LabeledResponse, test_pairs: Iterable[tuple[int, int]] = (),
             zero_edges: bool = False, scale_regression: bool = True) -> BlockEdges:
    """Drug-cell edges from training responses; every test pair is left out entirely.

    Regression weights are min-max scaled over the training values only.
    """
    test = set(map(tuple, test_pairs))
    keep = np.array([tuple(p) not in test for p in labels.pairs.tolist()], dtype=bool) \
        if len(labels) else np.zeros(0, bool)
    pairs = labels.pairs[keep]
    w = labels.values[keep].astype(np.float64)
    if labels.task == CLASSIFICATION:
        if not zero_edges:
            nz = w != 0
            pairs, w = pairs[nz], w[nz]
    elif scale_regression and len(w):
        lo, hi = w.min(), w.max()
        w = (w - lo) / (hi - lo) if hi > lo else np.ones_like(w)
    return BlockEdges(DRUG, CELL, pairs[:, 0], pairs[:, 1], w)


def build_cg(expression: np.ndarray, ddof: int = 0) -> BlockEdges:
    """Per-gene z-scores across cells; an edge for every strictly positive z."""
    X = np.asarray(expression, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("cell-gene edges need at least two cell lines")
    mu = X.mean(axis=0)
    sd = X.std(axis=0, ddof=ddof)
    ok = sd > 0
    z = np.zeros_like(X)
    z[:, ok] = (X[:, ok] - mu[ok]) / sd[ok]
    rows, cols = np.nonzero(z > 0)
    return BlockEdges(CELL, GENE, rows, cols, z[rows, cols])


def build_dg(known: np.ndarray, mode: str = "train", zero_padding: bool = True) -> BlockEdges:
    """Drug-gene edges.

    ``train``: weight 1 for known interactions; unknown pairs become weight-0
    edges when ``zero_padding`` is on and are absent otherwise.
    ``interpret``: complete bipartite, weight 1 known and 0.5 unknown.
    """
    known = np.asarray(known, dtype=bool)
    if mode == "train":
        if zero_padding:
            rows, cols = np.nonzero(np.ones_like(known))
            return BlockEdges(DRUG, GENE, rows, cols, known[rows, cols].astype(np.float64))
        rows, cols = np.nonzero(known)
        return BlockEdges(DRUG, GENE, rows, cols, np.ones(len(rows)))
    if mode == "interpret":
        rows, cols = np.nonzero(np.ones_like(known))
        return BlockEdges(DRUG, GENE, rows, cols, np.where(known[rows, cols], 1.0, SOFT_EDGE))
    raise ValueError(f"unknown drug-gene mode {mode!r}")


@dataclass
class UnifiedGraph:
    n: int
    m: int
    l: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    kind: np.ndarray
    _dense: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def num_nodes(self) -> int:
        return self.n + self.m + self.l

    @property
    def num_edges(self) -> int:
        return len(self.src)

    def offset(self, node_type: str) -> int:
        return {DRUG: 0, CELL: self.n, GENE: self.n + self.m}[node_type]

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """(weights, mask) as N x N arrays; row = attending node, column = neighbor."""
        if self._dense is None:
            N = self.num_nodes
            W = np.zeros((N, N))
            M = np.zeros((N, N), dtype=bool)
            W[self.dst, self.src] = self.weight
            M[self.dst, self.src] = True
            self._dense = (W, M)
        return self._dense

    def adjacency(self) -> np.ndarray:
        return self.dense()[0].copy()

    def edge_keys(self) -> list[tuple[int, int, float, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist(), self.weight.tolist(), self.kind.tolist()))

    def identical(self, other: "UnifiedGraph") -> bool:
        return (self.n, self.m, self.l) == (other.n, other.m, other.l) and all(
            np.array_equal(a, b) for a, b in ((self.src, other.src), (self.dst, other.dst),
                                              (self.weight, other.weight), (self.kind, other.kind)))

    def edges_of_kind(self, kind: str) -> np.ndarray:
        return np.flatnonzero(self.kind == KIND_CODES[kind])

    def write_edge_list(self, path: str | Path) -> None:
        write_rows(path, ["src", "dst", "weight", "kind"],
                   [(s, d, float(w), KIND_NAMES[k]) for s, d, w, k in self.edge_keys()])


def assemble(n: int, m: int, l: int, *blocks: BlockEdges) -> UnifiedGraph:
    """Place block edges into the unified node space and symmetrize.

    Blocks may be given in either orientation (e.g. gene x cell instead of cell x gene).
    """
    sizes = {DRUG: n, CELL: m, GENE: l}
    offsets = {DRUG: 0, CELL: n, GENE: n + m}
    canonical = {(DRUG, CELL): DRUG_CELL, (DRUG, GENE): DRUG_GENE, (CELL, GENE): CELL_GENE}
    src, dst, w, kind = [], [], [], []
    for block in blocks:
        if (block.row_type, block.col_type) not in canonical:
            block = block.transpose()
        key = (block.row_type, block.col_type)
        if key not in canonical:
            raise ValueError(f"blocks within one node type are not allowed: {key}")
        if len(block) and (block.rows.min() < 0 or block.rows.max() >= sizes[block.row_type]
                           or block.cols.min() < 0 or block.cols.max() >= sizes[block.col_type]):
            raise IndexError(f"{key} edge index out of block range")
        a = block.rows + offsets[block.row_type]
        b = block.cols + offsets[block.col_type]
        code = KIND_CODES[canonical[key]]
        src += [a, b]
        dst += [b, a]
        w += [block.weights, block.weights]
        kind += [np.full(len(a), code), np.full(len(a), code)]
    if src:
        src_a, dst_a = np.concatenate(src), np.concatenate(dst)
        w_a, kind_a = np.concatenate(w), np.concatenate(kind)
    else:
        src_a = dst_a = kind_a = np.zeros(0, dtype=np.int64)
        w_a = np.zeros(0)
    order = np.lexsort((src_a, dst_a))
    src_a, dst_a, w_a, kind_a = src_a[order], dst_a[order], w_a[order], kind_a[order]
    if len(src_a) > 1:
        dup = (np.diff(src_a) == 0) & (np.diff(dst_a) == 0)
        if dup.any():
            raise ValueError("duplicate edges in assembled graph")
    return UnifiedGraph(n, m, l, src_a.astype(np.int64), dst_a.astype(np.int64),
                        w_a.astype(np.float64), kind_a.astype(np.int64))


def build_graph(data: ProcessedDataset, test_pairs: Iterable[tuple[int, int]] = (),
                options: GraphOptions | None = None, dg_mode: str = "train") -> UnifiedGraph:
    opts = options or GraphOptions()
    dc = build_dc(data.labels, test_pairs, zero_edges=opts.dc_zero_edges, scale_regression=opts.scale_regression)
    dg = build_dg(data.dti.known, mode=dg_mode, zero_padding=opts.dg_zero_padding)
    cg = build_cg(data.expression.values, ddof=opts.std_ddof)
    return assemble(len(data.drugs), len(data.cells), len(data.genes), dc, dg, cg)
