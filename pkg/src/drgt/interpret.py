"""Attention-based gene ranking per drug and hallmark over-representation analysis."""
from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import DRUG_GENE, KIND_CODES, Features, UnifiedGraph
from .model import GTModel
from .tables import read_rows, write_rows

FDR_THRESHOLD = 0.05
TOP_K_EVIDENCE = 5
TOP_K_ENRICHMENT = 100


@dataclass
class RankedGene:
    gene: str
    score: float
    rank: int
    known: bool
    renormalized: float


@dataclass
class AttentionReport:
    ranking: dict[str, list[RankedGene]]
    checkpoint: str = ""
    layer: int = -1
    split: str = "validation"

    def drugs(self) -> list[str]:
        return list(self.ranking)

    def genes_for(self, drug: str) -> list[str]:
        return [r.gene for r in self.ranking[drug]]

    def scores(self, drug: str) -> dict[str, float]:
        return {r.gene: r.score for r in self.ranking[drug]}

    def write(self, path: str | Path, renormalized: bool = False) -> None:
        header = ["drug", "gene", "score", "rank", "known_dti"] + (["renormalized"] if renormalized else [])
        rows = []
        for drug, entries in self.ranking.items():
            for r in entries:
                row = [drug, r.gene, repr(r.score), str(r.rank), str(int(r.known))]
                if renormalized:
                    row.append(repr(r.renormalized))
                rows.append(row)
        write_rows(path, header, rows)


def rank_genes(scores: Mapping[str, float], known: Iterable[str] = ()) -> list[RankedGene]:
    """Sort descending by score; equal scores fall back to gene id."""
    known = set(known)
    order = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    total = sum(scores.values())
    return [RankedGene(g, float(s), i + 1, g in known, float(s / total) if total > 0 else 0.0)
            for i, (g, s) in enumerate(order)]


def head_mean(alpha: np.ndarray) -> np.ndarray:
    """Average attention over the head axis; input shape (heads, edges)."""
    return np.asarray(alpha, dtype=np.float64).mean(axis=0)


def extract_ac(model: GTModel, graph: UnifiedGraph, features: Features, drugs: Sequence[str],
               genes: Sequence[str], known: np.ndarray | None = None, layer: int | None = None,
               checkpoint: str = "") -> AttentionReport:
    """Head-averaged attention that each drug pays to its gene neighbours.

    ``graph`` should be built in interpret mode so every drug-gene pair carries an edge.
    ``layer`` defaults to the final layer; anything else is for analysis only.
    """
    if model.cfg.num_layers < 1:
        raise ValueError("model has no attention layers")
    was_training = model.training
    model.eval_mode()
    try:
        _, per_layer = model.forward(graph, features)
    finally:
        model.train_mode(was_training)
    k = model.cfg.num_layers - 1 if layer is None else layer
    if not -model.cfg.num_layers <= k < model.cfg.num_layers:
        raise ValueError(f"layer {layer} out of range")
    alpha = head_mean(per_layer[k])

    # drug <- gene messages: drug node is dst, gene node is src
    n, m = graph.n, graph.m
    sel = (graph.kind == KIND_CODES[DRUG_GENE]) & (graph.dst < n) & (graph.src >= n + m)
    scores: dict[str, dict[str, float]] = {d: {} for d in drugs}
    for e in np.flatnonzero(sel):
        i, j = int(graph.dst[e]), int(graph.src[e]) - n - m
        scores[drugs[i]][genes[j]] = float(alpha[e])
    ranking = {}
    for i, d in enumerate(drugs):
        kn = [genes[j] for j in np.flatnonzero(known[i])] if known is not None else []
        ranking[d] = rank_genes(scores[d], kn)
    return AttentionReport(ranking, checkpoint, k if k >= 0 else model.cfg.num_layers + k)


def top_k(report: AttentionReport, drug: str, k: int = TOP_K_EVIDENCE) -> list[str]:
    if k < 1:
        raise ValueError("k must be >= 1")
    genes = report.genes_for(drug)
    if k > len(genes):
        warnings.warn(f"k={k} exceeds the {len(genes)} genes ranked for {drug}; returning all", stacklevel=2)
    return genes[:k]


@dataclass
class GeneSetCollection:
    sets: dict[str, list[str]]
    source: str = ""

    def __len__(self) -> int:
        return len(self.sets)


def parse_gmt(path: str | Path, source: str | None = None) -> GeneSetCollection:
    sets: dict[str, list[str]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise ValueError(f"{path}:{lineno}: GMT line needs name, description and at least one gene")
            genes = list(dict.fromkeys(g.strip().upper() for g in fields[2:] if g.strip()))
            if not genes:
                raise ValueError(f"{path}:{lineno}: gene set {fields[0]!r} is empty")
            sets[fields[0]] = genes
    if not sets:
        raise ValueError(f"{path}: no gene sets found")
    return GeneSetCollection(sets, source if source is not None else Path(path).stem)


def hypergeom_upper(k: int, N: int, K: int, n: int) -> float:
    """P(X >= k) for X ~ Hypergeometric(N, K, n), using exact integer arithmetic."""
    if not (0 <= K <= N and 0 <= n <= N):
        raise ValueError("invalid hypergeometric parameters")
    lo, hi = max(k, 0, n - (N - K)), min(n, K)
    if lo > hi:
        return 0.0
    num = sum(math.comb(K, x) * math.comb(N - K, n - x) for x in range(lo, hi + 1))
    den = math.comb(N, n)
    return 1.0 if num == den else num / den


def benjamini_hochberg(pvalues: Sequence[float]) -> np.ndarray:
    p = np.asarray(pvalues, dtype=np.float64)
    if p.size == 0:
        return p
    order = np.argsort(p, kind="stable")
    ranked = p[order] * p.size / np.arange(1, p.size + 1)
    q_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    q = np.empty_like(p)
    q[order] = np.minimum(q_sorted, 1.0)
    return q


@dataclass
class EnrichmentResult:
    drug: str
    gene_set: str
    overlap: int
    set_size: int
    query_size: int
    universe: int
    p: float
    q: float = float("nan")

    @property
    def significant(self) -> bool:
        return self.q < FDR_THRESHOLD


def ora(query: Sequence[str], collection: GeneSetCollection, universe: Sequence[str],
        drug: str = "") -> list[EnrichmentResult]:
    """Hypergeometric over-representation of each set in ``query``; BH across the collection."""
    if len(query) == 0:
        raise ValueError("empty query")
    uni = {g.upper() for g in universe}
    q_set = {g.upper() for g in query}
    outside = q_set - uni
    if outside:
        raise ValueError(f"query genes outside the universe: {sorted(outside)[:5]}")
    N, n = len(uni), len(q_set)
    results = []
    for name, genes in collection.sets.items():
        members = set(genes) & uni
        k = len(members & q_set)
        results.append(EnrichmentResult(drug, name, k, len(members), n, N, hypergeom_upper(k, N, len(members), n)))
    for r, q in zip(results, benjamini_hochberg([r.p for r in results])):
        r.q = float(q)
    return results


def enrich_report(report: AttentionReport, collection: GeneSetCollection, universe: Sequence[str],
                  k: int = TOP_K_ENRICHMENT) -> list[EnrichmentResult]:
    out = []
    for drug in report.drugs():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            genes = top_k(report, drug, k)
        out.extend(ora(genes, collection, universe, drug))
    return out


def write_enrichment(path: str | Path, results: Sequence[EnrichmentResult]) -> None:
    header = ["drug", "gene_set", "overlap", "set_size", "query_size", "universe", "p", "q", "significant"]
    write_rows(path, header, [[r.drug, r.gene_set, str(r.overlap), str(r.set_size), str(r.query_size),
                               str(r.universe), repr(r.p), repr(r.q), str(int(r.significant))] for r in results])


def read_moa(path: str | Path) -> dict[str, str]:
    rows = read_rows(path)
    if rows and [c.strip().lower() for c in rows[0][:2]] == ["drug", "moa"]:
        rows = rows[1:]
    return {r[0].strip(): r[1].strip() for r in rows if len(r) >= 2}


@dataclass
class MoaSummary:
    counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def total(self, gene_set: str) -> int:
        return sum(self.counts.get(gene_set, {}).values())

    def rows(self) -> list[tuple[str, str, int]]:
        return [(s, moa, c) for s, by in sorted(self.counts.items()) for moa, c in sorted(by.items())]


def moa_summary(results: Sequence[EnrichmentResult], annotation: Mapping[str, str],
                gene_sets: Iterable[str] | None = None) -> MoaSummary:
    """Count drugs significantly enriched for each set, split by mechanism of action."""
    names = list(gene_sets) if gene_sets is not None else list(dict.fromkeys(r.gene_set for r in results))
    counts: dict[str, dict[str, int]] = {s: defaultdict(int) for s in names}
    seen = set()
    for r in results:
        if r.significant and (r.drug, r.gene_set) not in seen:
            seen.add((r.drug, r.gene_set))
            counts.setdefault(r.gene_set, defaultdict(int))[annotation.get(r.drug, "other")] += 1
    return MoaSummary({s: dict(c) for s, c in counts.items()})
