"""Command-line entry point: ``drgt <command> --config run.toml [--set section.key=value ...]``."""
from __future__ import annotations

import functools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import DataConfig, RunConfig, dump_toml, load_config
from .dataset import ProcessedDataset, load_matrices, prepare
from .evaluation import RANDOM_MASK_CV, make_split, write_report_json
from .fixture import NOISE_LEVELS, make_synthetic_fixture
from .graph import build_features, build_graph
from .interpret import (enrich_report, extract_ac, moa_summary, parse_gmt, read_moa, top_k,
                        write_enrichment)
from .model import AllTrialsDiverged, ConfigError, evaluate_loss, load_checkpoint, random_search, save_checkpoint
from .numcore import DivergedError
from .pipeline import fit, run_leave_one_out, run_random_mask_cv, run_zero_shot
from .pubmed import (DiskCache, FixtureTransport, LiveTransport, PubMedClient, ServiceUnavailable,
                     TokenBucket, heatmap_matrix, read_alias_file, summarize_support, write_records)
from .smiles import SmilesError, fingerprint_matrix, read_smiles_file, write_fingerprint_matrix
from .tables import write_labeled_matrix, write_rows

log = logging.getLogger("drgt")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_UNAVAILABLE = 0, 1, 2, 3


class RunDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers

def load_dataset(data: DataConfig, cfg: RunConfig) -> ProcessedDataset:
    if data.processed and Path(data.processed, "task.txt").exists():
        ds = ProcessedDataset.load(data.processed)
        if ds.task != cfg.preprocess.task:
            raise ConfigError(f"processed dataset at {data.processed} is {ds.task}, config asks for "
                              f"{cfg.preprocess.task}")
        return ds
    missing = [k for k in ("response", "expression", "dti") if not getattr(data, k)]
    if missing:
        raise ConfigError(f"data.{missing[0]} is required when no processed dataset is given")
    bundle = load_matrices(data.response, data.expression, data.dti, data.fingerprints or None,
                           data.smiles or None, data.drug_allowlist or None, data.fingerprint_radius)
    for line in bundle.report.lines():
        log.info(line)
    return prepare(bundle, cfg.preprocess.task, cfg.preprocess.percentile_scope, cfg.preprocess.gene_fraction)


def validation_split(ds: ProcessedDataset, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    k = len(ds.labels)
    frac = cfg.split.validation_fraction
    if frac <= 0:
        return np.arange(k), np.zeros(0, dtype=np.int64)
    folds = max(2, int(round(1.0 / frac)))
    fold = make_split(RANDOM_MASK_CV, ds.labels, seed=cfg.split.seed, n_folds=folds).folds[0]
    return fold.train, fold.test


def outdir(cfg: RunConfig, *parts: str) -> Path:
    p = Path(cfg.output, *parts)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ----------------------------------------------------------------- commands

def cmd_preprocess(cfg: RunConfig) -> Path:
    ds = load_dataset(replace(cfg.data, processed=""), cfg)
    out = outdir(cfg, "processed")
    ds.save(out)
    return out


def cmd_train(cfg: RunConfig) -> Path:
    ds = load_dataset(cfg.data, cfg)
    train_idx, val_idx = validation_split(ds, cfg)
    model, graph, result = fit(ds, cfg.model, train_idx, val_idx, graph_options=cfg.graph)
    out = outdir(cfg)
    rows = [(str(i), repr(v), repr(result.val_loss[i]) if i < len(result.val_loss) else "")
            for i, v in enumerate(result.train_loss)]
    write_rows(out / "loss_trace.tsv", ["epoch", "train_loss", "val_loss"], rows)
    if result.diverged:
        raise RunDiverged(f"training diverged after {len(result.train_loss)} epochs; trace kept")
    save_checkpoint(model, out / "model.ckpt", extra={"validation_index": val_idx.tolist(),
                                                      "drugs": ds.drugs, "cells": ds.cells, "genes": ds.genes})
    graph.write_edge_list(out / "graph_edges.tsv")
    return out / "model.ckpt"


def cmd_evaluate(cfg: RunConfig, test: int | None = None) -> Path:
    test = cfg.split.test if test is None else test
    ds = load_dataset(cfg.data, cfg)
    out = outdir(cfg, f"test{test}")
    task = ds.task
    if test == 3:
        target = load_dataset(cfg.target, cfg)
        zs = run_zero_shot(ds, target, cfg.model, cfg.graph, seed=cfg.split.seed)
        write_report_json(out / "zero_shot.json", {
            "overall": zs.report, "seen": zs.seen, "unseen": zs.unseen, "seen_fraction": zs.seen_fraction})
        return out
    if test == 1:
        res = run_random_mask_cv(ds, cfg.model, seed=cfg.split.seed, graph_options=cfg.graph,
                                 n_folds=cfg.split.n_folds, with_ci=True)
    else:
        res = run_leave_one_out(ds, cfg.model, axis=cfg.split.axis, seed=cfg.split.seed,
                                max_entities=cfg.split.max_entities or None, graph_options=cfg.graph,
                                with_ci=True)
    for k, fold in enumerate(res.folds):
        payload = {"fold": k, "held_out": fold.held_out, "report": fold.report}
        write_report_json(out / f"fold_{k}.json", payload)
    mean, std = res.summary(task)
    write_report_json(out / "summary.json", {
        "split": res.kind, "metric": "auroc" if task == "classification" else "r2",
        "mean": mean, "std": std, "folds": len(res.folds), "per_fold": res.metric_values(task)})
    return out


def _pubmed_client(cfg: RunConfig) -> PubMedClient | None:
    pc = cfg.pubmed
    aliases = read_alias_file(pc.aliases) if pc.aliases else {}
    cache = DiskCache(pc.cache) if pc.cache else None
    if pc.transport == "fixture":
        if not pc.fixture:
            return None
        return PubMedClient(FixtureTransport.from_file(pc.fixture), "fixture", cache, None, aliases)
    return PubMedClient(LiveTransport(field_tag=pc.field_tag or None), "live", cache, TokenBucket(pc.rate), aliases)


def cmd_explain(cfg: RunConfig) -> Path:
    ec = cfg.explain
    ckpt = Path(ec.checkpoint) if ec.checkpoint else Path(cfg.output) / "model.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, extra = load_checkpoint(ckpt)
    ds = load_dataset(cfg.data, cfg)
    if (len(ds.drugs), len(ds.cells), len(ds.genes)) != model.sizes:
        raise ConfigError("checkpoint sizes do not match the dataset")
    val_idx = np.asarray(extra.get("validation_index", []), dtype=np.int64)
    hidden = [tuple(p) for p in ds.labels.pairs[val_idx].tolist()]
    graph = build_graph(ds, hidden, cfg.graph, dg_mode="interpret")
    features = build_features(ds)
    layer = None if ec.layer == -1 else ec.layer
    report = extract_ac(model, graph, features, ds.drugs, ds.genes, ds.dti.known, layer, ckpt.name)
    out = outdir(cfg, "explain")
    report.write(out / "attention.tsv", renormalized=True)
    graph.write_edge_list(out / "interpret_edges.tsv")
    for name, k in (("top5.tsv", ec.top_k_evidence), ("top100.tsv", ec.top_k_enrichment)):
        rows = []
        for d in report.drugs():
            rows.extend((d, str(r + 1), g) for r, g in enumerate(report.genes_for(d)[:k]))
        write_rows(out / name, ["drug", "rank", "gene"], rows)

    if ec.gene_sets:
        collection = parse_gmt(ec.gene_sets)
        results = enrich_report(report, collection, ds.genes, ec.top_k_enrichment)
        write_enrichment(out / "enrichment.tsv", results)
        if ec.moa:
            summary = moa_summary(results, read_moa(ec.moa), collection.sets)
            write_rows(out / "moa_summary.tsv", ["gene_set", "moa", "drugs"],
                       [(s, m, str(c)) for s, m, c in summary.rows()])
    else:
        log.info("no gene-set file configured; enrichment skipped")

    client = _pubmed_client(cfg)
    if client is None:
        log.info("no PubMed fixture configured; literature support skipped")
        return out
    pairs = [(d, g) for d in report.drugs() for g in top_k(report, d, ec.top_k_evidence)]
    records = {p: client.count(*p) for p in pairs}
    write_records(out / "pubmed_counts.tsv", records.values())
    drugs, genes, grid = heatmap_matrix(records.values())
    write_labeled_matrix(out / "pubmed_heatmap_ln.csv", drugs, genes, np.array(grid).reshape(len(drugs), -1), "drug")
    known = [(ds.drugs[i], ds.genes[j]) for i, j in zip(*np.nonzero(ds.dti.known))]
    summary = summarize_support(pairs, known, records)
    write_rows(out / "support_summary.tsv", ["statistic", "value"], summary.rows())
    if summary.unavailable:
        raise ServiceUnavailable(f"{summary.unavailable} PubMed lookups unavailable; partial outputs written")
    return out


def cmd_tune(cfg: RunConfig) -> Path:
    ds = load_dataset(cfg.data, cfg)
    train_idx, val_idx = validation_split(ds, cfg)
    if len(val_idx) == 0:
        raise ConfigError("split.validation_fraction must be > 0 for tuning")
    features = build_features(ds)

    def objective(mc):
        model, graph, result = fit(ds, mc, train_idx, val_idx, features, cfg.graph)
        if result.diverged:
            raise DivergedError("trial diverged")
        return evaluate_loss(model, graph, features, ds.labels.select(val_idx))

    out = outdir(cfg, "tune")
    best, trials = random_search(cfg.search_space(), cfg.search.budget, objective, cfg.model, cfg.search.seed)
    log_rows = [{"index": t.index, "status": t.status, "val_loss": t.val_loss, "config": t.config.to_dict()}
                for t in trials]
    (out / "trials.json").write_text(json.dumps(log_rows, indent=1, sort_keys=True) + "\n")
    (out / "best.toml").write_text(dump_toml(replace(cfg, model=best)))
    return out


def cmd_fingerprint(smiles_path: str, out_path: str, radius: int = 2) -> Path:
    entries = read_smiles_file(smiles_path)
    ids, bits = fingerprint_matrix(entries, radius=radius)
    write_fingerprint_matrix(out_path, ids, bits)
    return Path(out_path)


def cmd_synth(out: str, n: int, m: int, l: int, seed: int, noise: str) -> Path:
    fx = make_synthetic_fixture(n, m, l, seed=seed, noise=noise)
    paths = fx.write(out)
    cfg = RunConfig()
    cfg.data = DataConfig(response="response.csv", expression="expression.csv", dti="dti.tsv",
                          fingerprints="fingerprints.csv")
    cfg.explain.moa = str(paths["moa"].name)
    cfg.output = "run"
    Path(out, "config.toml").write_text(dump_toml(cfg))
    return Path(out)


# ---------------------------------------------------------------- click glue

def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ServiceUnavailable as exc:
            click.echo(f"error: external service unavailable: {exc}", err=True)
            sys.exit(EXIT_UNAVAILABLE)
        except (RunDiverged, DivergedError, AllTrialsDiverged) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)
        except (ConfigError, SmilesError, FileNotFoundError, ValueError, KeyError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except RuntimeError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)
    return wrapper


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                             help="TOML run configuration.")
set_option = click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
                          help="Override a config value; repeatable.")
output_option = click.option("--output", default=None, help="Output directory (overrides the config).")


def _config(config_path, overrides, output=None) -> RunConfig:
    overrides = list(overrides)
    if output:
        overrides.append(f"output={output}")
    return load_config(config_path, overrides)


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool):
    """Drug response prediction with a graph transformer."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command()
@config_option
@set_option
@output_option
@_exit_codes
def preprocess(config_path, overrides, output):
    """Align and preprocess raw matrices; writes processed/ and stats.tsv."""
    out = cmd_preprocess(_config(config_path, overrides, output))
    click.echo(str(out))


@main.command("train")
@config_option
@set_option
@output_option
@_exit_codes
def train_cmd(config_path, overrides, output):
    """Train a model; writes model.ckpt and loss_trace.tsv."""
    click.echo(str(cmd_train(_config(config_path, overrides, output))))


@main.command()
@config_option
@set_option
@output_option
@click.option("--test", type=click.IntRange(1, 3), default=None, help="1 random masking, 2 leave-one-out, 3 zero-shot.")
@_exit_codes
def evaluate(config_path, overrides, output, test):
    """Run an evaluation protocol and write metric reports."""
    click.echo(str(cmd_evaluate(_config(config_path, overrides, output), test)))


@main.command()
@config_option
@set_option
@output_option
@_exit_codes
def explain(config_path, overrides, output):
    """Attention rankings, enrichment and literature support for a trained model."""
    click.echo(str(cmd_explain(_config(config_path, overrides, output))))


@main.command()
@config_option
@set_option
@output_option
@_exit_codes
def tune(config_path, overrides, output):
    """Random search over the tuning ranges; writes trials.json and best.toml."""
    click.echo(str(cmd_tune(_config(config_path, overrides, output))))


@main.command()
@click.argument("smiles_path", type=click.Path(dir_okay=False))
@click.argument("out_path", type=click.Path(dir_okay=False))
@click.option("--radius", type=int, default=2, show_default=True)
@_exit_codes
def fingerprint(smiles_path, out_path, radius):
    """Convert a SMILES table into a 2048-bit fingerprint matrix."""
    if not Path(smiles_path).exists():
        raise FileNotFoundError(f"input file not found: {smiles_path}")
    click.echo(str(cmd_fingerprint(smiles_path, out_path, radius)))


@main.command()
@click.argument("out", type=click.Path(file_okay=False))
@click.option("--drugs", "n", type=int, default=40, show_default=True)
@click.option("--cells", "m", type=int, default=30, show_default=True)
@click.option("--genes", "l", type=int, default=60, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--noise", type=click.Choice(sorted(NOISE_LEVELS)), default="low", show_default=True)
@_exit_codes
def synth(out, n, m, l, seed, noise):
    """Write a synthetic fixture dataset plus a starter config.toml."""
    click.echo(str(cmd_synth(out, n, m, l, seed, noise)))


if __name__ == "__main__":
    main()
