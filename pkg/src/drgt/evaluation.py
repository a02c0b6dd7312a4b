"""Split plans for the three test protocols, metrics and confidence intervals."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import norm, rankdata

from .dataset import LabeledResponse

log = logging.getLogger(__name__)

RANDOM_MASK_CV = "random_mask_cv"
LEAVE_DRUG_OUT = "leave_drug_out"
LEAVE_CELL_OUT = "leave_cell_out"
ZERO_SHOT = "zero_shot"
SPLIT_KINDS = (RANDOM_MASK_CV, LEAVE_DRUG_OUT, LEAVE_CELL_OUT, ZERO_SHOT)


@dataclass
class Fold:
    train: np.ndarray  # indices into the labeled entries
    test: np.ndarray
    held_out: str | None = None  # entity identifier for leave-one-out folds


@dataclass
class SplitPlan:
    kind: str
    folds: list[Fold]
    seed: int

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "seed": self.seed, "folds": [
            {"train": f.train.tolist(), "test": f.test.tolist(), "held_out": f.held_out} for f in self.folds]})

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        return cls(d["kind"], [Fold(np.array(f["train"], dtype=np.int64), np.array(f["test"], dtype=np.int64),
                                    f.get("held_out")) for f in d["folds"]], d["seed"])


def make_split(kind: str, labels: LabeledResponse, seed: int = 0, n_folds: int = 5,
               entities: Sequence[str] | None = None, max_entities: int | None = None) -> SplitPlan:
    """Build train/test index folds over ``labels`` entries.

    ``random_mask_cv`` shuffles observed entries into ``n_folds`` disjoint test sets.
    Leave-one-out kinds make one fold per drug (or cell); ``entities`` or
    ``max_entities`` restrict which are held out. For ``zero_shot`` use
    :func:`zero_shot_split`.
    """
    if len(labels) == 0:
        raise ValueError("cannot split an empty label set")
    rng = np.random.default_rng(seed)
    k = len(labels)
    if kind == RANDOM_MASK_CV:
        perm = rng.permutation(k)
        folds = []
        for chunk in np.array_split(perm, n_folds):
            test = np.sort(chunk)
            train = np.setdiff1d(np.arange(k), test)
            folds.append(Fold(train, test))
        return SplitPlan(kind, folds, seed)
    if kind in (LEAVE_DRUG_OUT, LEAVE_CELL_OUT):
        axis = 0 if kind == LEAVE_DRUG_OUT else 1
        names = labels.drugs if axis == 0 else labels.cells
        if entities is None:
            chosen = list(range(len(names)))
            if max_entities is not None and max_entities < len(chosen):
                chosen = sorted(rng.choice(len(names), size=max_entities, replace=False).tolist())
        else:
            index = {x: i for i, x in enumerate(names)}
            chosen = [index[e] for e in entities]
        folds = []
        for ent in chosen:
            test = np.flatnonzero(labels.pairs[:, axis] == ent)
            if len(test) == 0:
                log.warning("skipping %s: no observed pairs", names[ent])
                continue
            folds.append(Fold(np.flatnonzero(labels.pairs[:, axis] != ent), test, names[ent]))
        if entities is not None and not folds:
            raise ValueError("no held-out entity has observed pairs")
        return SplitPlan(kind, folds, seed)
    raise ValueError(f"unknown split kind {kind!r}")


@dataclass
class ZeroShotPairs:
    """Target-dataset entries mapped onto the source dataset's drug/cell indices."""

    pairs: np.ndarray  # (k, 2) in source indices
    values: np.ndarray
    seen: np.ndarray  # bool per pair
    target_index: np.ndarray  # index into the target labels


def zero_shot_split(source: LabeledResponse, target: LabeledResponse) -> ZeroShotPairs:
    """Align target entries by shared identifiers; a pair is seen iff observed in ``source``."""
    d_index = {d: i for i, d in enumerate(source.drugs)}
    c_index = {c: j for j, c in enumerate(source.cells)}
    observed = source.pair_set()
    pairs, values, seen, idx = [], [], [], []
    for k, ((d, c), v) in enumerate(zip(target.named_pairs(), target.values)):
        if d in d_index and c in c_index:
            p = (d_index[d], c_index[c])
            pairs.append(p)
            values.append(v)
            seen.append(p in observed)
            idx.append(k)
    return ZeroShotPairs(np.array(pairs, dtype=np.int64).reshape(-1, 2), np.array(values),
                         np.array(seen, dtype=bool), np.array(idx, dtype=np.int64))


# ------------------------------------------------------------------- metrics

def auroc(scores, labels) -> float | None:
    """Mann-Whitney AUROC with midranks; ``None`` when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _delong_components(scores: np.ndarray, labels: np.ndarray):
    pos, neg = scores[labels == 1], scores[labels == 0]
    m, n = len(pos), len(neg)
    r_all = rankdata(np.concatenate([pos, neg]))
    r_pos, r_neg = rankdata(pos), rankdata(neg)
    auc = (r_all[:m].sum() - m * (m + 1) / 2.0) / (m * n)
    v10 = (r_all[:m] - r_pos) / n
    v01 = 1.0 - (r_all[m:] - r_neg) / m
    return auc, v10, v01


def delong_variance(scores, labels) -> tuple[float, float]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if (labels == 1).sum() < 2 or (labels == 0).sum() < 2:
        raise ValueError("DeLong needs at least two items per class")
    auc, v10, v01 = _delong_components(scores, labels)
    var = v10.var(ddof=1) / len(v10) + v01.var(ddof=1) / len(v01)
    return float(auc), float(var)


def delong_ci(scores, labels, level: float = 0.95) -> tuple[float, float]:
    """Normal-approximation CI from the DeLong structural-component variance, clipped to [0, 1]."""
    auc, var = delong_variance(scores, labels)
    if not var > 0:
        return auc, auc
    half = norm.ppf(0.5 + level / 2.0) * math.sqrt(var)
    return max(0.0, auc - half), min(1.0, auc + half)


def r2(y, y_hat) -> float | None:
    """``1 - SS_res / SS_tot``; ``None`` when the targets have zero variance."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if len(y) < 2:
        return None
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return None
    return 1.0 - float(((y - y_hat) ** 2).sum()) / ss_tot


@dataclass
class BootstrapCI:
    lo: float
    hi: float
    degenerate: int
    resamples: int

    @property
    def reliable(self) -> bool:
        return self.degenerate <= self.resamples / 2


def bootstrap_r2_ci(y, y_hat, resamples: int = 1000, level: float = 0.95, seed: int = 0) -> BootstrapCI:
    """Percentile CI of R^2 over pair resamples; zero-variance resamples are skipped and counted."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if len(y) < 2:
        raise ValueError("bootstrap needs at least two pairs")
    rng = np.random.default_rng(seed)
    stats, degenerate = [], 0
    for _ in range(resamples):
        idx = rng.integers(0, len(y), len(y))
        value = r2(y[idx], y_hat[idx])
        if value is None:
            degenerate += 1
        else:
            stats.append(value)
    if not stats:
        return BootstrapCI(float("nan"), float("nan"), degenerate, resamples)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [100 * alpha, 100 * (1 - alpha)])
    return BootstrapCI(float(lo), float(hi), degenerate, resamples)


def bootstrap_auroc_ci(scores, labels, resamples: int = 1000, level: float = 0.95, seed: int = 0):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    rng = np.random.default_rng(seed)
    stats = []
    for _ in range(resamples):
        idx = rng.integers(0, len(scores), len(scores))
        value = auroc(scores[idx], labels[idx])
        if value is not None:
            stats.append(value)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


@dataclass
class MetricReport:
    n: int
    auroc: float | None = None
    auroc_ci: tuple[float, float] | None = None
    r2: float | None = None
    r2_ci: tuple[float, float] | None = None
    r2_ci_reliable: bool = True
    unique_drugs: int = 0
    strata: dict[str, "MetricReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"n": self.n, "auroc": self.auroc, "auroc_ci": self.auroc_ci, "r2": self.r2,
             "r2_ci": self.r2_ci, "r2_ci_reliable": self.r2_ci_reliable, "unique_drugs": self.unique_drugs}
        if self.strata:
            d["strata"] = {k: v.to_dict() for k, v in self.strata.items()}
        return d


def metric_report(y, y_hat, task: str, drugs: Sequence | None = None, seed: int = 0,
                  resamples: int = 1000, with_ci: bool = True) -> MetricReport:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    rep = MetricReport(n=len(y), unique_drugs=len(set(drugs)) if drugs is not None else 0)
    if task == "classification":
        rep.auroc = auroc(y_hat, y)
        if with_ci and rep.auroc is not None and min((y == 1).sum(), (y == 0).sum()) >= 2:
            rep.auroc_ci = delong_ci(y_hat, y)
    else:
        rep.r2 = r2(y, y_hat)
        if with_ci and rep.r2 is not None:
            ci = bootstrap_r2_ci(y, y_hat, resamples=resamples, seed=seed)
            rep.r2_ci = (ci.lo, ci.hi)
            rep.r2_ci_reliable = ci.reliable
    return rep


def stratified_report(y, y_hat, task: str, groups: Sequence[str | None], drugs: Sequence,
                      seed: int = 0, with_ci: bool = False) -> MetricReport:
    """Overall report plus one stratum per group, strata ordered best-first by the task metric."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    groups = np.array(["other" if g is None else g for g in groups], dtype=object)
    drugs = np.asarray(drugs, dtype=object)
    overall = metric_report(y, y_hat, task, drugs, seed=seed, with_ci=with_ci)
    strata = {}
    for g in sorted(set(groups.tolist())):
        sel = groups == g
        strata[g] = metric_report(y[sel], y_hat[sel], task, drugs[sel], seed=seed, with_ci=with_ci)
    key = "auroc" if task == "classification" else "r2"
    ranked = sorted(strata.items(), key=lambda kv: (getattr(kv[1], key) is None,
                                                    -(getattr(kv[1], key) or 0.0), kv[0]))
    overall.strata = dict(ranked)
    return overall


def summarize_folds(values: Sequence[float | None]) -> tuple[float, float]:
    """Mean and population std over folds with a defined metric."""
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return float("nan"), float("nan")
    return float(vals.mean()), float(vals.std())


def write_report_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, MetricReport):
        return obj.to_dict()
    raise TypeError(f"cannot serialize {type(obj)}")
