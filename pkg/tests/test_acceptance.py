"""One test per acceptance criterion; each prints a PASS/FAIL line (collected again in the terminal summary)."""
import itertools
import math
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from drgt import numcore as nc
from drgt.dataset import (DtiMatrix, ExpressionMatrix, ResponseMatrix, prepare, preprocess_classification,
                          preprocess_regression, select_genes)
from drgt.evaluation import (LEAVE_CELL_OUT, LEAVE_DRUG_OUT, RANDOM_MASK_CV, auroc, bootstrap_auroc_ci, delong_ci,
                             make_split, r2, zero_shot_split)
from drgt.fixture import make_synthetic_fixture
from drgt.graph import DRUG_CELL, GraphOptions, build_features, build_graph
from drgt.interpret import benjamini_hochberg, extract_ac, hypergeom_upper, ora, GeneSetCollection, rank_genes
from drgt.model import GTModel, ModelConfig, bce_loss, train
from drgt.pipeline import fit, run_random_mask_cv
from drgt.pubmed import (CACHE, LIVE, CoOccurrenceRecord, DiskCache, FIXTURE, PubMedClient, ServiceUnavailable,
                         TokenBucket, summarize_support)
from drgt.dataset import LabeledResponse
from drgt.smiles import morgan_fingerprint, parse_smiles, smiles_fingerprint, write_smiles

from conftest import Criterion, tiny_dataset
from test_smiles import random_smiles

SMALL = ModelConfig(hidden=(8, 8, 8), num_layers=2, heads=2, dropout_pre=0.0, dropout_post=0.0,
                    dropout_mlp=0.0, activation="gelu", epochs=5, seed=0)
BENCH = ModelConfig(hidden=(256, 64, 32), num_layers=2, heads=4, epochs=300, lr=1e-3)


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    return sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (len(pos) * len(neg))


def enumerated_upper(k, N, K, n):
    hits = total = 0
    for draw in itertools.combinations(range(N), n):
        total += 1
        hits += sum(x < K for x in draw) >= k
    return Fraction(hits, total)


def test_gradient_oracle():
    with Criterion(1, "end-to-end finite-difference gradient check on a 4x3x5 graph") as c:
        start = time.perf_counter()
        data = tiny_dataset(n=4, m=3, l=5, seed=0)
        g, f = build_graph(data), build_features(data)
        model = GTModel(SMALL, 4, 3, 5).eval_mode()

        def loss():
            Z, _ = model.forward(g, f)
            return bce_loss(model.predict(Z, data.labels.pairs), data.labels.values)

        rep = nc.check_gradients(loss, model.parameters(), tolerance=1e-4)
        elapsed = time.perf_counter() - start
        c.detail = f"{rep.rel_error.size} coordinates, max rel err {rep.rel_error.max():.2e}, {elapsed:.1f}s"
        assert rep.passed and np.all(rep.rel_error < 1e-4)
        assert elapsed < 60


def test_attention_normalization():
    with Criterion(2, "attention sums to one at every non-isolated node, head and layer") as c:
        worst = 0.0
        for norm, seed in itertools.product(["graph", "batch", "layer"], range(3)):
            data = tiny_dataset(n=5, m=4, l=6, seed=seed, full=False)
            g, f = build_graph(data), build_features(data)
            model = GTModel(replace(SMALL, norm=norm, heads=4, num_layers=3), 5, 4, 6)
            train(model, g, f, data.labels, epochs=3)
            model.eval_mode()
            _, alphas = model.forward(g, f)
            has_in = np.bincount(g.dst, minlength=g.num_nodes) > 0
            for layer in alphas:
                for h in range(layer.shape[0]):
                    sums = np.bincount(g.dst, weights=layer[h], minlength=g.num_nodes)
                    worst = max(worst, float(np.abs(sums[has_in] - 1.0).max()))
        c.detail = f"max |sum - 1| = {worst:.1e}"
        assert worst <= 1e-9


@pytest.mark.parametrize("task", ["classification", "regression"])
def test_leakage_audit(task):
    with Criterion(3, f"masked responses never reach the graph or the loss trace ({task})"):
        data = tiny_dataset(n=6, m=5, l=6, seed=11, task=task)
        cfg = replace(SMALL, dropout_pre=0.2, dropout_post=0.2, dropout_mlp=0.1, epochs=6, task=task)
        rng = np.random.default_rng(0)
        plan = make_split(RANDOM_MASK_CV, data.labels, seed=0)
        for fold in plan.folds:
            noisy = data.labels.values.copy()
            noisy[fold.test] += rng.normal(0.0, 5.0, len(fold.test))
            if task == "classification":
                noisy[fold.test] = 1.0 - data.labels.values[fold.test]
            perturbed = data.labels.with_values(noisy)
            _, g1, r1 = fit(data, cfg, fold.train)
            _, g2, r2_ = fit(data, cfg, fold.train, labels=perturbed)
            assert g1.identical(g2)
            assert r1.train_loss == r2_.train_loss and len(r1.train_loss) == 6
            dc = g1.edges_of_kind(DRUG_CELL)
            touched = {(int(s), int(d) - g1.n) for s, d in zip(g1.src[dc], g1.dst[dc]) if s < g1.n}
            assert touched.isdisjoint(map(tuple, data.labels.pairs[fold.test].tolist()))


def test_metric_oracles():
    with Criterion(4, "AUROC, hypergeometric and R2 against exhaustive or direct oracles") as c:
        checked = 0
        rng = np.random.default_rng(0)
        for k in range(2, 13):
            for _ in range(40):
                labels = rng.integers(0, 2, k)
                scores = rng.integers(0, 4, k)
                if len(set(labels.tolist())) < 2:
                    assert auroc(scores, labels) is None
                    continue
                assert auroc(scores, labels) == brute_auroc(scores, labels)
                checked += 1
        for k in range(2, 7):
            for labels in itertools.product([0, 1], repeat=k):
                if len(set(labels)) == 2:
                    for scores in itertools.product([0, 1, 2], repeat=k):
                        assert auroc(scores, labels) == brute_auroc(scores, labels)
                        checked += 1
        hyper = 0
        for N in range(1, 13):
            for K in range(N + 1):
                for n in range(N + 1):
                    for k in range(min(n, K) + 2):
                        assert hypergeom_upper(k, N, K, n) == float(enumerated_upper(k, N, K, n))
                        hyper += 1
        worst = 0.0
        for seed in range(200):
            rng = np.random.default_rng(seed)
            y, yh = rng.normal(size=25), rng.normal(size=25)
            direct = 1 - np.sum((y - yh) ** 2) / np.sum((y - y.mean()) ** 2)
            worst = max(worst, abs(r2(y, yh) - direct))
        c.detail = f"{checked} AUROC inputs, {hyper} hypergeometric cases, R2 max diff {worst:.1e}"
        assert worst <= 1e-12


def test_delong_sanity():
    with Criterion(5, "DeLong CI: perfect separation and width within 25% of bootstrap") as c:
        assert delong_ci([0.1, 0.2, 0.3, 0.7, 0.8, 0.9], [0, 0, 0, 1, 1, 1]) == (1.0, 1.0)
        ratios = []
        for seed in range(50):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(40, 201))
            y = rng.integers(0, 2, n)
            y[:2] = [0, 1]
            s = rng.normal(size=n) + rng.uniform(0.3, 1.5) * y
            lo, hi = delong_ci(s, y)
            blo, bhi = bootstrap_auroc_ci(s, y, resamples=1000, seed=seed)
            ratios.append((hi - lo) / (bhi - blo))
        c.detail = f"width ratio range [{min(ratios):.3f}, {max(ratios):.3f}] over 50 instances"
        assert all(0.75 <= r <= 1.25 for r in ratios)


@pytest.fixture(scope="module")
def fixture_runs():
    """Five-fold random-mask runs on the 40x30x60 low-noise fixture, cached across criteria 6 and 13."""
    fx = make_synthetic_fixture(n=40, m=30, l=60, seed=0, noise="low")
    runs, cache = {}, {}

    def get(name):
        if name in runs:
            return runs[name]
        task = "regression" if name == "regression" else "classification"
        if task not in cache:
            cache[task] = prepare(fx.bundle, task)
        data = cache[task]
        labels, options = None, None
        if name == "shuffled":
            labels = data.labels.with_values(np.random.default_rng(0).permutation(data.labels.values))
        if name == "no_padding":
            options = GraphOptions(dg_zero_padding=False)
        start = time.perf_counter()
        res = run_random_mask_cv(data, replace(BENCH, task=task), seed=0, graph_options=options, labels=labels)
        runs[name] = (res.summary(task), time.perf_counter() - start, res)
        return runs[name]

    return get


def test_fixture_performance(fixture_runs):
    with Criterion(6, "fixture 5-fold AUROC >= 0.90, R2 >= 0.50, shuffled AUROC in [0.40, 0.60], < 10 min") as c:
        (auc, auc_sd), t1, _ = fixture_runs("classification")
        (fit_r2, r2_sd), t2, _ = fixture_runs("regression")
        (shuf, _), t3, _ = fixture_runs("shuffled")
        total = t1 + t2 + t3
        c.detail = (f"AUROC {auc:.3f}+-{auc_sd:.3f}, R2 {fit_r2:.3f}+-{r2_sd:.3f}, "
                    f"shuffled AUROC {shuf:.3f}, {total:.0f}s")
        assert auc >= 0.90
        assert fit_r2 >= 0.50
        assert 0.40 <= shuf <= 0.60
        assert total < 600


def test_split_contracts():
    with Criterion(7, "split invariants: random-mask fuzz, leave-one-out, zero-shot partition"):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n, m = int(rng.integers(3, 12)), int(rng.integers(3, 12))
            pairs = [(i, j) for i in range(n) for j in range(m) if rng.random() < 0.8]
            lab = LabeledResponse([f"d{i}" for i in range(n)], [f"c{j}" for j in range(m)], pairs,
                                  rng.integers(0, 2, len(pairs)).astype(float), "classification")
            k = len(lab)
            plan = make_split(RANDOM_MASK_CV, lab, seed=seed)
            tests = [set(f.test.tolist()) for f in plan.folds]
            assert len(tests) == 5 and set().union(*tests) == set(range(k)) and sum(map(len, tests)) == k
            for f, t in zip(plan.folds, tests):
                assert t.isdisjoint(f.train.tolist()) and len(f.train) + len(t) == k
                assert abs(len(t) - 0.2 * k) <= 1
            for kind, axis in ((LEAVE_DRUG_OUT, 0), (LEAVE_CELL_OUT, 1)):
                for f in make_split(kind, lab, seed=seed).folds:
                    held = set(lab.pairs[f.test, axis].tolist())
                    assert len(held) == 1
                    assert not np.isin(lab.pairs[f.train, axis], list(held)).any()
        source = LabeledResponse(["a", "b"], ["x", "y"], [(0, 0), (1, 1)], [1.0, 0.0], "classification")
        target = LabeledResponse(["b", "a", "z"], ["x", "y"], [(0, 1), (0, 0), (1, 0), (1, 1), (2, 0)],
                                 [1.0, 1.0, 0.0, 1.0, 0.0], "classification")
        zs = zero_shot_split(source, target)
        assert zs.target_index.tolist() == [0, 1, 2, 3]
        assert zs.seen.tolist() == [True, False, True, False]


def test_fingerprint_invariance():
    with Criterion(8, "50 molecules x 5 rewritings give identical fingerprints; radius-monotone bits"):
        rng = np.random.default_rng(1)
        for k in range(50):
            text = random_smiles(rng)
            mol = parse_smiles(text)
            ref = smiles_fingerprint(text)
            wr = np.random.default_rng(1000 + k)
            for _ in range(5):
                assert np.array_equal(smiles_fingerprint(write_smiles(mol, wr)), ref)
            prev = morgan_fingerprint(mol, 0).astype(bool)
            for radius in (1, 2, 3):
                cur = morgan_fingerprint(mol, radius).astype(bool)
                assert np.all(cur[prev])
                prev = cur


def one_drug(log_values):
    ic50 = 10.0 ** np.asarray(log_values, dtype=float)
    return ResponseMatrix.from_array(["d"], [f"c{j}" for j in range(len(ic50))], ic50[None, :])


def by_cell(lab):
    return {lab.cells[c]: v for (_, c), v in zip(lab.pairs.tolist(), lab.values)}


def test_preprocessing_suite():
    with Criterion(9, "margin labels, pIC50 clip, ten-measurement minimum, top-decile plus DTI genes"):
        no_filter = (0.0, 100.0)
        assert by_cell(preprocess_classification(one_drug([-1.5, 1.5, -0.5, 0.5, 0.0, 0.0]),
                                                 percentiles=no_filter)) == {"c0": 1.0, "c1": 0.0}
        assert len(preprocess_classification(one_drug([-1.0, 1.0]), percentiles=no_filter)) == 0
        row = lambda v: ResponseMatrix.from_array(["d"], [f"c{j}" for j in range(len(v))], np.array([v], float))
        vals = by_cell(preprocess_regression(row([1.0, 1e-20, 1e3] + [1e-6] * 8)))
        assert (vals["c0"], vals["c1"], vals["c2"]) == (0.0, 15.0, 0.0)
        assert len(preprocess_regression(row([1e-6] * 9 + [np.nan]))) == 0
        assert len(preprocess_regression(row([1e-6] * 10))) == 10
        names = [f"G{k}" for k in range(10)]
        values = np.outer(np.array([-1.0, 1.0] * 3), np.sqrt([0] * 4 + [100] + [0] * 5))
        known = np.zeros((1, 10), bool)
        known[0, 7] = True
        chosen = select_genes(ExpressionMatrix([f"c{i}" for i in range(6)], names, values),
                              DtiMatrix(["d"], names, known))
        assert chosen.tolist() == [4, 7]


def test_interpretability_determinism():
    with Criterion(10, "eval-mode attention extraction is bit-reproducible, bounded and tie-stable"):
        data = tiny_dataset(n=4, m=3, l=6, seed=1)
        f = build_features(data)
        cfg = replace(SMALL, dropout_pre=0.2, dropout_post=0.2, attention_dropout=0.1)
        model = GTModel(cfg, 4, 3, 6)
        train(model, build_graph(data), f, data.labels)
        gi = build_graph(data, dg_mode="interpret")
        model.train_mode()
        a = extract_ac(model, gi, f, data.drugs, data.genes, data.dti.known)
        b = extract_ac(model, gi, f, data.drugs, data.genes, data.dti.known)
        for d in data.drugs:
            sa = [(r.gene, r.score) for r in a.ranking[d]]
            assert sa == [(r.gene, r.score) for r in b.ranking[d]]
            assert sum(s for _, s in sa) <= 1 + 1e-9
        ranked = rank_genes({"B": 0.3, "A": 0.3, "C": 0.4})
        assert [r.gene for r in ranked] == ["C", "A", "B"]


def test_ora_and_bh():
    with Criterion(11, "BH step-up monotone; N=10 K=4 n=5 k=3 gives 66/252 exactly"):
        assert hypergeom_upper(3, 10, 4, 5) == 66 / 252
        universe = [f"G{i}" for i in range(10)]
        res = ora(["G0", "G1", "G2", "G7", "G8"], GeneSetCollection({"S": ["G0", "G1", "G2", "G3"]}), universe)
        assert res[0].p == 66 / 252
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = rng.random(int(rng.integers(1, 40))) ** 3
            q = benjamini_hochberg(p)
            order = np.argsort(p, kind="stable")
            assert np.all(np.diff(q[order]) >= 0) and np.all(q >= p - 1e-15) and np.all(q <= 1.0)


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now

    def sleep(self, seconds):
        self.now += seconds


def test_pubmed_client(tmp_path):
    with Criterion(12, "PubMed rate limit, cache, unavailable kept distinct, hand-tallied summary"):
        clock = FakeClock()
        times = []

        def timed(drug, gene):
            times.append(clock())
            return 7

        client = PubMedClient(timed, LIVE, limiter=TokenBucket(3.0, clock=clock, sleep=clock.sleep), sleep=clock.sleep)
        for k in range(20):
            client.count(f"drug{k}", "EGFR")
        assert all(sum(1 for u in times[i:] if u < t + 1.0 - 1e-9) <= 3 for i, t in enumerate(times))

        calls = []
        cached = PubMedClient(lambda d, g: calls.append((d, g)) or 4, LIVE, cache=DiskCache(tmp_path), limiter=None)
        assert cached.count("a", "B").source == LIVE and cached.count("A", "b").source == CACHE and len(calls) == 1

        def down(drug, gene):
            raise ServiceUnavailable("down")

        rec = PubMedClient(down, LIVE, limiter=None, sleep=lambda s: None).count("x", "Y")
        assert rec.count is None and not rec.available and math.isnan(rec.log_count())

        pairs = [(f"d{i}", f"G{2 * i - 1 + k}") for i in range(1, 6) for k in range(2)]
        counts = {p: 0 for p in pairs}
        counts.update({("d1", "G1"): 12, ("d3", "G5"): 3, ("d4", "G7"): 1})
        s = summarize_support(pairs, [("d1", "G1"), ("d2", "G3")],
                              {p: CoOccurrenceRecord(*p, n, "t", FIXTURE) for p, n in counts.items()})
        assert (s.total, s.known, s.novel, s.supported, s.novel_supported, s.known_supported) == (10, 2, 8, 3, 2, 1)
        assert s.pct_drugs_novel_supported == 40.0


def test_zero_padding_comparison(fixture_runs, tmp_path):
    with Criterion(13, "fixture with and without drug-gene zero padding: two configurations compared") as c:
        (pad, pad_sd), _, res_pad = fixture_runs("classification")
        (nopad, nopad_sd), _, res_nopad = fixture_runs("no_padding")
        g_pad, g_nopad = res_pad.folds[0].graph, res_nopad.folds[0].graph
        assert not g_pad.identical(g_nopad) and g_pad.num_edges > g_nopad.num_edges
        report = tmp_path / "zero_padding.tsv"
        report.write_text("configuration\tauroc_mean\tauroc_std\tedges\n"
                          f"with_padding\t{pad:.4f}\t{pad_sd:.4f}\t{g_pad.num_edges}\n"
                          f"without_padding\t{nopad:.4f}\t{nopad_sd:.4f}\t{g_nopad.num_edges}\n")
        assert len(report.read_text().splitlines()) == 3
        direction = "holds" if pad >= nopad else "does not hold"
        c.detail = f"padding {pad:.3f} vs no padding {nopad:.3f}; padding >= no padding {direction} (not asserted)"
