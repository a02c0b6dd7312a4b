"""Loading, alignment and task-specific preprocessing of the four input matrices."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import smiles as smiles_mod
from .tables import read_labeled_matrix, read_rows, parse_float, write_labeled_matrix, write_rows

log = logging.getLogger(__name__)

CLASSIFICATION = "classification"
REGRESSION = "regression"
PIC50_RANGE = (0.0, 15.0)
MIN_REGRESSION_OBS = 10


@dataclass
class ResponseMatrix:
    drugs: list[str]
    cells: list[str]
    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        _check_unique(self.drugs, "drug")
        _check_unique(self.cells, "cell")
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)

    @classmethod
    def from_array(cls, drugs, cells, values) -> "ResponseMatrix":
        values = np.asarray(values, dtype=np.float64)
        return cls(list(drugs), list(cells), values, ~np.isnan(values))

    def subset(self, drug_idx, cell_idx) -> "ResponseMatrix":
        d, c = np.asarray(drug_idx, int), np.asarray(cell_idx, int)
        return ResponseMatrix([self.drugs[i] for i in d], [self.cells[j] for j in c],
                              self.values[np.ix_(d, c)], self.observed[np.ix_(d, c)])


@dataclass
class ExpressionMatrix:
    cells: list[str]
    genes: list[str]
    values: np.ndarray

    def __post_init__(self):
        _check_unique(self.cells, "cell")
        _check_unique(self.genes, "gene")
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("expression matrix contains non-finite values")


@dataclass
class DtiMatrix:
    drugs: list[str]
    genes: list[str]
    known: np.ndarray

    def __post_init__(self):
        self.known = np.asarray(self.known, dtype=bool)


@dataclass
class FingerprintMatrix:
    drugs: list[str]
    bits: np.ndarray

    def __post_init__(self):
        _check_unique(self.drugs, "drug")
        self.bits = np.asarray(self.bits, dtype=np.float64)


@dataclass
class LabeledResponse:
    """Preprocessed (drug, cell, value) entries; indices refer to ``drugs``/``cells``."""

    drugs: list[str]
    cells: list[str]
    pairs: np.ndarray  # (k, 2) int
    values: np.ndarray  # (k,)
    task: str

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=np.float64)
        keys = set(map(tuple, self.pairs.tolist()))
        if len(keys) != len(self.pairs):
            raise ValueError("duplicate (drug, cell) entries in labeled response")

    def __len__(self) -> int:
        return len(self.values)

    def pair_set(self) -> set[tuple[int, int]]:
        return set(map(tuple, self.pairs.tolist()))

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {tuple(p): v for p, v in zip(self.pairs.tolist(), self.values.tolist())}

    def named_pairs(self) -> list[tuple[str, str]]:
        return [(self.drugs[d], self.cells[c]) for d, c in self.pairs.tolist()]

    def select(self, mask_or_idx) -> "LabeledResponse":
        idx = np.asarray(mask_or_idx)
        return LabeledResponse(self.drugs, self.cells, self.pairs[idx], self.values[idx], self.task)

    def with_values(self, values) -> "LabeledResponse":
        return LabeledResponse(self.drugs, self.cells, self.pairs.copy(), np.asarray(values, float), self.task)


@dataclass
class AlignmentReport:
    dropped_drugs: list[str] = field(default_factory=list)
    dropped_cells: list[str] = field(default_factory=list)
    dropped_genes: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [f"dropped drugs ({len(self.dropped_drugs)}): {', '.join(self.dropped_drugs)}",
               f"dropped cells ({len(self.dropped_cells)}): {', '.join(self.dropped_cells)}",
               f"dropped genes ({len(self.dropped_genes)}): {', '.join(self.dropped_genes)}"]
        return out + self.notes


@dataclass
class DatasetBundle:
    response: ResponseMatrix
    expression: ExpressionMatrix
    dti: DtiMatrix
    fingerprints: FingerprintMatrix
    report: AlignmentReport = field(default_factory=AlignmentReport)


def _check_unique(ids: Sequence[str], what: str) -> None:
    if len(set(ids)) != len(ids):
        dupes = sorted({x for x in ids if list(ids).count(x) > 1})
        raise ValueError(f"duplicate {what} identifiers: {dupes}")


# ------------------------------------------------------------------- loading

def _is_number(cell: str) -> bool:
    try:
        parse_float(cell, "")
        return True
    except ValueError:
        return False


def _average_duplicates(row_ids, col_ids, values):
    """Collapse repeated row/column identifiers by averaging observed raw values."""
    rows = list(dict.fromkeys(row_ids))
    cols = list(dict.fromkeys(col_ids))
    r_index = {r: i for i, r in enumerate(rows)}
    c_index = {c: j for j, c in enumerate(cols)}
    total = np.zeros((len(rows), len(cols)))
    count = np.zeros((len(rows), len(cols)))
    for i, r in enumerate(row_ids):
        for j, c in enumerate(col_ids):
            v = values[i, j]
            if not np.isnan(v):
                total[r_index[r], c_index[c]] += v
                count[r_index[r], c_index[c]] += 1
    out = np.divide(total, count, out=np.full_like(total, np.nan), where=count > 0)
    return rows, cols, out


def load_response(path: str | Path) -> ResponseMatrix:
    """Read raw IC50 values as a drug x cell matrix or a long (drug, cell, value) table."""
    rows = read_rows(path)
    if not rows:
        raise ValueError(f"{path}: empty file")
    long_format = len(rows[0]) == 3 and len(rows) > 1 and not _is_number(rows[1][1])
    if long_format:
        drug_ids = [r[0].strip() for r in rows[1:]]
        cell_ids = [r[1].strip() for r in rows[1:]]
        drugs = list(dict.fromkeys(drug_ids))
        cells = list(dict.fromkeys(cell_ids))
        total = np.zeros((len(drugs), len(cells)))
        count = np.zeros_like(total)
        di = {d: i for i, d in enumerate(drugs)}
        ci = {c: j for j, c in enumerate(cells)}
        for k, r in enumerate(rows[1:], start=2):
            v = parse_float(r[2], f"{path}:{k}")
            if not np.isnan(v):
                total[di[r[0].strip()], ci[r[1].strip()]] += v
                count[di[r[0].strip()], ci[r[1].strip()]] += 1
        values = np.divide(total, count, out=np.full_like(total, np.nan), where=count > 0)
        return ResponseMatrix.from_array(drugs, cells, values)
    row_ids, col_ids, values = read_labeled_matrix(path)
    if len(set(row_ids)) != len(row_ids) or len(set(col_ids)) != len(col_ids):
        row_ids, col_ids, values = _average_duplicates(row_ids, col_ids, values)
    return ResponseMatrix.from_array(row_ids, col_ids, values)


def load_expression(path: str | Path) -> ExpressionMatrix:
    cells, genes, values = read_labeled_matrix(path)
    if np.isnan(values).any():
        raise ValueError(f"{path}: expression matrix has missing values")
    return ExpressionMatrix(cells, genes, values)


def load_dti(path: str | Path) -> DtiMatrix:
    """Read known interactions as a 0/1 drug x gene matrix or a two-column (drug, gene) list."""
    rows = read_rows(path)
    if not rows:
        raise ValueError(f"{path}: empty file")
    if len(rows[0]) == 2 and (len(rows) == 1 or not _is_number(rows[1][1])):
        pairs = [(r[0].strip(), r[1].strip().upper()) for r in rows[1:]]
        drugs = list(dict.fromkeys(d for d, _ in pairs))
        genes = list(dict.fromkeys(g for _, g in pairs))
        known = np.zeros((len(drugs), len(genes)), dtype=bool)
        di = {d: i for i, d in enumerate(drugs)}
        gi = {g: j for j, g in enumerate(genes)}
        for d, g in pairs:
            known[di[d], gi[g]] = True
        return DtiMatrix(drugs, genes, known)
    drugs, genes, values = read_labeled_matrix(path)
    return DtiMatrix(drugs, [g.upper() for g in genes], np.nan_to_num(values) != 0)


def load_fingerprints(path: str | Path) -> FingerprintMatrix:
    drugs, _, values = read_labeled_matrix(path)
    if np.isnan(values).any():
        raise ValueError(f"{path}: fingerprint matrix has missing values")
    return FingerprintMatrix(drugs, values)


def fingerprints_from_smiles(path: str | Path, radius: int = 2) -> FingerprintMatrix:
    ids, bits = smiles_mod.fingerprint_matrix(smiles_mod.read_smiles_file(path), radius=radius)
    return FingerprintMatrix(ids, bits)


def read_id_list(path: str | Path) -> list[str]:
    rows = read_rows(path)
    return [r[0].strip() for r in rows[1:]]


def read_alias_map(path: str | Path) -> dict[str, str]:
    """Two-column (identifier, preferred name) file with a header row."""
    return {r[0].strip(): r[1].strip() for r in read_rows(path)[1:] if len(r) >= 2}


def align(response: ResponseMatrix, expression: ExpressionMatrix, dti: DtiMatrix,
          fingerprints: FingerprintMatrix, drug_allowlist: Sequence[str] | None = None) -> DatasetBundle:
    """Intersect identifiers across the matrices.

    Drugs must have a response row and a fingerprint; cells must have a response
    column and an expression profile. Drugs missing from the DTI file have no
    known interactions. DTI genes without expression are dropped.
    """
    report = AlignmentReport()
    fp_ids = set(fingerprints.drugs)
    allowed = set(drug_allowlist) if drug_allowlist is not None else None
    drugs = [d for d in response.drugs if d in fp_ids and (allowed is None or d in allowed)]
    report.dropped_drugs = [d for d in response.drugs if d not in set(drugs)]
    expr_cells = set(expression.cells)
    cells = [c for c in response.cells if c in expr_cells]
    report.dropped_cells = [c for c in response.cells if c not in expr_cells] + \
        [c for c in expression.cells if c not in set(response.cells)]
    if not drugs or not cells:
        raise ValueError("empty intersection between response and side-information matrices")
    for d in report.dropped_drugs:
        log.info("dropping drug %s (no fingerprint or not allowlisted)", d)
    for c in report.dropped_cells:
        log.info("dropping cell %s (missing from response or expression)", c)

    d_index = {d: i for i, d in enumerate(response.drugs)}
    c_index = {c: j for j, c in enumerate(response.cells)}
    resp = response.subset([d_index[d] for d in drugs], [c_index[c] for c in cells])
    e_index = {c: j for j, c in enumerate(expression.cells)}
    genes = [g.upper() for g in expression.genes]
    expr = ExpressionMatrix(cells, genes, expression.values[[e_index[c] for c in cells]])
    f_index = {d: i for i, d in enumerate(fingerprints.drugs)}
    fps = FingerprintMatrix(drugs, fingerprints.bits[[f_index[d] for d in drugs]])

    g_index = {g: j for j, g in enumerate(genes)}
    known = np.zeros((len(drugs), len(genes)), dtype=bool)
    dti_d = {d: i for i, d in enumerate(dti.drugs)}
    missing_genes = [g for g in dti.genes if g.upper() not in g_index]
    report.dropped_genes = missing_genes
    for g in missing_genes:
        log.info("dropping DTI gene %s (no expression profile)", g)
    for i, d in enumerate(drugs):
        if d not in dti_d:
            continue
        row = dti.known[dti_d[d]]
        for j, g in enumerate(dti.genes):
            if row[j] and g.upper() in g_index:
                known[i, g_index[g.upper()]] = True
    return DatasetBundle(resp, expr, DtiMatrix(drugs, genes, known), fps, report)


def load_matrices(response: str | Path, expression: str | Path, dti: str | Path,
                  fingerprints: str | Path | None = None, smiles: str | Path | None = None,
                  drug_allowlist: str | Path | None = None, fingerprint_radius: int = 2) -> DatasetBundle:
    for p in (response, expression, dti, fingerprints, smiles, drug_allowlist):
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"input file not found: {p}")
    if fingerprints is not None:
        fps = load_fingerprints(fingerprints)
    elif smiles is not None:
        fps = fingerprints_from_smiles(smiles, radius=fingerprint_radius)
    else:
        raise ValueError("either a fingerprint matrix or a SMILES file is required")
    allow = read_id_list(drug_allowlist) if drug_allowlist is not None else None
    return align(load_response(response), load_expression(expression), load_dti(dti), fps, allow)


# ------------------------------------------------------------- preprocessing

def _drug_margin_labels(x: np.ndarray) -> np.ndarray:
    """Sensitive (1) below mean - std, resistant (0) above mean + std, nan otherwise."""
    mu = x.mean()
    sigma = x.std()
    out = np.full(x.shape, np.nan)
    out[x < mu - sigma] = 1.0
    out[x > mu + sigma] = 0.0
    return out


def _percentile_keep(resp: ResponseMatrix, percentile_scope: str, percentiles: tuple[float, float]):
    if percentile_scope not in ("global", "per_drug"):
        raise ValueError(f"unknown percentile scope {percentile_scope!r}")
    valid = resp.observed & np.isfinite(resp.values) & (np.nan_to_num(resp.values) > 0)
    logv = np.where(valid, np.log10(np.where(valid, resp.values, 1.0)), np.nan)
    keep = valid.copy()
    if percentile_scope == "global" and valid.any():
        lo, hi = np.percentile(logv[valid], percentiles)
        keep &= (logv >= lo) & (logv <= hi)
    elif percentile_scope == "per_drug":
        for i in range(logv.shape[0]):
            if valid[i].any():
                lo, hi = np.percentile(logv[i, valid[i]], percentiles)
                keep[i] &= (logv[i] >= lo) & (logv[i] <= hi)
    return logv, keep


def classification_zscores(resp: ResponseMatrix, percentile_scope: str = "global",
                           percentiles: tuple[float, float] = (2.5, 97.5)) -> np.ndarray:
    """Per-drug z-scores of log10 IC50 over the entries surviving the percentile filter (nan elsewhere)."""
    logv, keep = _percentile_keep(resp, percentile_scope, percentiles)
    z = np.full(logv.shape, np.nan)
    for i in range(logv.shape[0]):
        cols = np.flatnonzero(keep[i])
        if len(cols) >= 2 and logv[i, cols].std() > 0:
            x = logv[i, cols]
            z[i, cols] = (x - x.mean()) / x.std()
    return z


def preprocess_classification(resp: ResponseMatrix, percentile_scope: str = "global",
                              percentiles: tuple[float, float] = (2.5, 97.5)) -> LabeledResponse:
    """log10, central-percentile filter, then per-drug margin binarization."""
    logv, keep = _percentile_keep(resp, percentile_scope, percentiles)
    pairs, values = [], []
    for i in range(logv.shape[0]):
        cols = np.flatnonzero(keep[i])
        if len(cols) < 2:
            continue
        labels = _drug_margin_labels(logv[i, cols])
        for j, lab in zip(cols, labels):
            if not np.isnan(lab):
                pairs.append((i, j))
                values.append(lab)
    return LabeledResponse(resp.drugs, resp.cells, np.array(pairs, dtype=np.int64).reshape(-1, 2),
                           np.array(values), CLASSIFICATION)


def preprocess_regression(resp: ResponseMatrix, min_obs: int = MIN_REGRESSION_OBS) -> LabeledResponse:
    """pIC50 = -log10(IC50) clipped to [0, 15]; drugs with fewer than ``min_obs`` valid entries removed."""
    v = resp.values
    valid = resp.observed & ~np.isnan(v) & (v != 0) & (v != np.inf) & (np.nan_to_num(v) > 0)
    pic50 = np.clip(-np.log10(np.where(valid, v, 1.0)), *PIC50_RANGE)
    pairs, values = [], []
    for i in range(v.shape[0]):
        cols = np.flatnonzero(valid[i])
        if len(cols) < min_obs:
            continue
        pairs.extend((i, j) for j in cols)
        values.extend(pic50[i, cols])
    return LabeledResponse(resp.drugs, resp.cells, np.array(pairs, dtype=np.int64).reshape(-1, 2),
                           np.array(values), REGRESSION)


def preprocess(resp: ResponseMatrix, task: str, percentile_scope: str = "global") -> LabeledResponse:
    if task == CLASSIFICATION:
        return preprocess_classification(resp, percentile_scope)
    if task == REGRESSION:
        return preprocess_regression(resp)
    raise ValueError(f"unknown task {task!r}")


def to_ic50_matrix(labels: LabeledResponse) -> ResponseMatrix:
    """Invert a regression preprocessing result back to an IC50 matrix (10 ** -pIC50)."""
    vals = np.full((len(labels.drugs), len(labels.cells)), np.nan)
    for (d, c), p in zip(labels.pairs.tolist(), labels.values):
        vals[d, c] = 10.0 ** (-p)
    return ResponseMatrix.from_array(labels.drugs, labels.cells, vals)


def select_genes(expr: ExpressionMatrix, dti: DtiMatrix, top_fraction: float = 0.1) -> np.ndarray:
    """Indices (ascending) of top-variance genes unioned with every DTI-annotated gene.

    Ties at the decile boundary are broken by ascending gene identifier.
    """
    if expr.genes != dti.genes:
        raise ValueError("expression and DTI gene axes are not aligned")
    l = len(expr.genes)
    if l == 0:
        return np.zeros(0, dtype=np.int64)
    var = expr.values.var(axis=0)
    k = max(1, math.ceil(top_fraction * l))
    order = sorted(range(l), key=lambda j: (-var[j], expr.genes[j]))
    chosen = set(order[:k]) | set(np.flatnonzero(dti.known.any(axis=0)).tolist())
    return np.array(sorted(chosen), dtype=np.int64)


@dataclass
class ProcessedDataset:
    """Aligned, preprocessed matrices ready for graph construction."""

    labels: LabeledResponse
    expression: ExpressionMatrix
    dti: DtiMatrix
    fingerprints: FingerprintMatrix

    @property
    def drugs(self) -> list[str]:
        return self.labels.drugs

    @property
    def cells(self) -> list[str]:
        return self.labels.cells

    @property
    def genes(self) -> list[str]:
        return self.expression.genes

    @property
    def task(self) -> str:
        return self.labels.task

    def stats(self) -> list[tuple[str, int]]:
        return [("drugs", len(self.drugs)), ("cell_lines", len(self.cells)),
                ("drug_response_pairs", len(self.labels)),
                ("known_drug_target", int(self.dti.known.sum())), ("genes", len(self.genes))]

    def save(self, outdir: str | Path) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        write_rows(outdir / "labels.tsv", ["drug", "cell", "value"],
                   [(d, c, float(v)) for (d, c), v in zip(self.labels.named_pairs(), self.labels.values)])
        write_labeled_matrix(outdir / "expression.csv", self.cells, self.genes, self.expression.values, "cell")
        write_labeled_matrix(outdir / "dti.csv", self.drugs, self.genes, self.dti.known.astype(float), "drug")
        write_labeled_matrix(outdir / "fingerprints.csv", self.drugs,
                             [f"bit_{k}" for k in range(self.fingerprints.bits.shape[1])],
                             self.fingerprints.bits, "drug_id")
        (outdir / "task.txt").write_text(self.task + "\n")
        write_rows(outdir / "stats.tsv", ["statistic", "value"], self.stats())

    @classmethod
    def load(cls, outdir: str | Path) -> "ProcessedDataset":
        outdir = Path(outdir)
        task = (outdir / "task.txt").read_text().strip()
        cells, genes, ev = read_labeled_matrix(outdir / "expression.csv")
        drugs, _, dv = read_labeled_matrix(outdir / "dti.csv")
        fdrugs, _, fv = read_labeled_matrix(outdir / "fingerprints.csv")
        if fdrugs != drugs:
            raise ValueError(f"{outdir}: fingerprint and DTI drug order differ")
        di = {d: i for i, d in enumerate(drugs)}
        ci = {c: j for j, c in enumerate(cells)}
        pairs, values = [], []
        for row in read_rows(outdir / "labels.tsv")[1:]:
            pairs.append((di[row[0]], ci[row[1]]))
            values.append(float(row[2]))
        labels = LabeledResponse(drugs, cells, np.array(pairs, dtype=np.int64).reshape(-1, 2),
                                 np.array(values), task)
        return cls(labels, ExpressionMatrix(cells, genes, ev), DtiMatrix(drugs, genes, dv != 0),
                   FingerprintMatrix(drugs, fv))


def prepare(bundle: DatasetBundle, task: str, percentile_scope: str = "global",
            gene_fraction: float = 0.1, select: bool = True) -> ProcessedDataset:
    """Preprocess responses, keep drugs/cells with at least one label, then select genes."""
    labels = preprocess(bundle.response, task, percentile_scope)
    if len(labels) == 0:
        raise ValueError("no labelled drug-cell pairs survive preprocessing")
    d_keep = sorted(set(labels.pairs[:, 0].tolist()))
    c_keep = sorted(set(labels.pairs[:, 1].tolist()))
    d_map = {old: new for new, old in enumerate(d_keep)}
    c_map = {old: new for new, old in enumerate(c_keep)}
    drugs = [bundle.response.drugs[i] for i in d_keep]
    cells = [bundle.response.cells[j] for j in c_keep]
    pairs = np.array([(d_map[d], c_map[c]) for d, c in labels.pairs.tolist()], dtype=np.int64).reshape(-1, 2)
    labels = LabeledResponse(drugs, cells, pairs, labels.values, task)
    expr = ExpressionMatrix(cells, bundle.expression.genes, bundle.expression.values[c_keep])
    dti = DtiMatrix(drugs, bundle.dti.genes, bundle.dti.known[d_keep])
    fps = FingerprintMatrix(drugs, bundle.fingerprints.bits[d_keep])
    if select:
        keep = select_genes(expr, dti, gene_fraction)
        genes = [expr.genes[j] for j in keep]
        expr = ExpressionMatrix(cells, genes, expr.values[:, keep])
        dti = DtiMatrix(drugs, genes, dti.known[:, keep])
    return ProcessedDataset(labels, expr, dti, fps)
