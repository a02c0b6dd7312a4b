"""Glue for running the evaluation protocols end to end."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import LabeledResponse, ProcessedDataset
from .evaluation import (LEAVE_CELL_OUT, LEAVE_DRUG_OUT, RANDOM_MASK_CV, MetricReport, SplitPlan,
                         make_split, metric_report, summarize_folds, zero_shot_split)
from .graph import Features, GraphOptions, UnifiedGraph, build_features, build_graph
from .model import GTModel, ModelConfig, TrainResult, predict_pairs, train

log = logging.getLogger(__name__)


@dataclass
class FoldResult:
    test_index: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray
    report: MetricReport
    train: TrainResult
    graph: UnifiedGraph
    held_out: str | None = None


@dataclass
class ProtocolResult:
    kind: str
    folds: list[FoldResult] = field(default_factory=list)

    def metric_values(self, task: str) -> list[float | None]:
        key = "auroc" if task == "classification" else "r2"
        return [getattr(f.report, key) for f in self.folds]

    def summary(self, task: str) -> tuple[float, float]:
        return summarize_folds(self.metric_values(task))

    def pooled(self, task: str, seed: int = 0, with_ci: bool = True) -> MetricReport:
        y = np.concatenate([f.y_true for f in self.folds]) if self.folds else np.zeros(0)
        p = np.concatenate([f.y_pred for f in self.folds]) if self.folds else np.zeros(0)
        return metric_report(y, p, task, seed=seed, with_ci=with_ci)


def fit(data: ProcessedDataset, cfg: ModelConfig, train_idx: np.ndarray, test_idx: np.ndarray | None = None,
        features: Features | None = None, graph_options: GraphOptions | None = None,
        labels: LabeledResponse | None = None) -> tuple[GTModel, UnifiedGraph, TrainResult]:
    """Train on ``train_idx`` entries with every ``test_idx`` pair removed from the graph."""
    labels = labels if labels is not None else data.labels
    features = features if features is not None else build_features(data)
    test_idx = np.zeros(0, dtype=np.int64) if test_idx is None else np.asarray(test_idx, dtype=np.int64)
    # entries outside train_idx never reach the graph either
    hidden = np.setdiff1d(np.arange(len(labels)), train_idx)
    test_pairs = [tuple(p) for p in labels.pairs[hidden].tolist()]
    graph_data = ProcessedDataset(labels, data.expression, data.dti, data.fingerprints)
    graph = build_graph(graph_data, test_pairs, graph_options)
    model = GTModel(replace(cfg, task=labels.task), len(labels.drugs), len(labels.cells), len(data.genes))
    val = labels.select(test_idx) if len(test_idx) else None
    result = train(model, graph, features, labels.select(np.asarray(train_idx, dtype=np.int64)), val_labels=val)
    return model, graph, result


def run_plan(data: ProcessedDataset, cfg: ModelConfig, plan: SplitPlan, graph_options: GraphOptions | None = None,
             labels: LabeledResponse | None = None, with_ci: bool = False) -> ProtocolResult:
    labels = labels if labels is not None else data.labels
    features = build_features(data)
    out = ProtocolResult(plan.kind)
    for k, fold in enumerate(plan.folds):
        model, graph, result = fit(data, cfg, fold.train, fold.test, features, graph_options, labels)
        y_pred = predict_pairs(model, graph, features, labels.pairs[fold.test])
        y_true = labels.values[fold.test]
        drugs = labels.pairs[fold.test, 0]
        rep = metric_report(y_true, y_pred, labels.task, drugs, seed=cfg.seed + k, with_ci=with_ci)
        log.info("%s fold %d: n=%d auroc=%s r2=%s", plan.kind, k, rep.n, rep.auroc, rep.r2)
        out.folds.append(FoldResult(fold.test, y_true, y_pred, rep, result, graph, fold.held_out))
    return out


def run_random_mask_cv(data: ProcessedDataset, cfg: ModelConfig, seed: int = 0,
                       graph_options: GraphOptions | None = None, labels: LabeledResponse | None = None,
                       n_folds: int = 5, with_ci: bool = False) -> ProtocolResult:
    labels = labels if labels is not None else data.labels
    plan = make_split(RANDOM_MASK_CV, labels, seed=seed, n_folds=n_folds)
    return run_plan(data, cfg, plan, graph_options, labels, with_ci)


def run_leave_one_out(data: ProcessedDataset, cfg: ModelConfig, axis: str = "drug", seed: int = 0,
                      entities: Sequence[str] | None = None, max_entities: int | None = None,
                      graph_options: GraphOptions | None = None, with_ci: bool = False) -> ProtocolResult:
    kind = LEAVE_DRUG_OUT if axis == "drug" else LEAVE_CELL_OUT
    plan = make_split(kind, data.labels, seed=seed, entities=entities, max_entities=max_entities)
    return run_plan(data, cfg, plan, graph_options, with_ci=with_ci)


@dataclass
class ZeroShotResult:
    report: MetricReport
    seen: MetricReport | None
    unseen: MetricReport | None
    seen_fraction: float
    y_true: np.ndarray
    y_pred: np.ndarray
    seen_mask: np.ndarray


def run_zero_shot(source: ProcessedDataset, target: ProcessedDataset, cfg: ModelConfig,
                  graph_options: GraphOptions | None = None, seed: int = 0) -> ZeroShotResult:
    """Train on every source entry, predict target entries whose drug and cell exist in the source graph."""
    if source.task != target.task:
        raise ValueError("source and target tasks differ")
    features = build_features(source)
    model, graph, _ = fit(source, cfg, np.arange(len(source.labels)), None, features, graph_options)
    zs = zero_shot_split(source.labels, target.labels)
    if len(zs.pairs) == 0:
        raise ValueError("no target pairs share both drug and cell with the source")
    y_pred = predict_pairs(model, graph, features, zs.pairs)
    task = source.task

    def sub(mask):
        if mask.sum() == 0:
            return None
        return metric_report(zs.values[mask], y_pred[mask], task, zs.pairs[mask, 0], seed=seed)

    return ZeroShotResult(metric_report(zs.values, y_pred, task, zs.pairs[:, 0], seed=seed),
                          sub(zs.seen), sub(~zs.seen), float(zs.seen.mean()), zs.values, y_pred, zs.seen)
