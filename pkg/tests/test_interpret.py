import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from drgt.graph import CELL, DRUG, GENE, BlockEdges, Features, assemble, build_features, build_graph
from drgt.interpret import (AttentionReport, EnrichmentResult, GeneSetCollection, benjamini_hochberg, extract_ac,
                            head_mean, hypergeom_upper, moa_summary, ora, parse_gmt, rank_genes, read_moa, top_k)
from drgt.model import GTModel, ModelConfig, train

from conftest import tiny_dataset

CFG = ModelConfig(hidden=(8, 8, 8), num_layers=2, heads=2, dropout_pre=0.2, dropout_post=0.2, dropout_mlp=0.0,
                  attention_dropout=0.1, epochs=5)


def enumerated_upper(k, N, K, n):
    # count every n-subset of a population whose first K items are successes
    hits = total = 0
    for draw in itertools.combinations(range(N), n):
        total += 1
        hits += sum(x < K for x in draw) >= k
    return Fraction(hits, total)


def test_hypergeom_hand_case():
    assert hypergeom_upper(3, 10, 4, 5) == 66 / 252
    assert enumerated_upper(3, 10, 4, 5) == Fraction(66, 252)


@pytest.mark.parametrize("N", range(1, 13))
def test_hypergeom_matches_enumeration(N):
    rng = np.random.default_rng(N)
    for _ in range(6):
        K, n = int(rng.integers(0, N + 1)), int(rng.integers(0, N + 1))
        for k in range(0, min(n, K) + 2):
            assert hypergeom_upper(k, N, K, n) == float(enumerated_upper(k, N, K, n))


def test_hypergeom_degenerate_cases():
    assert hypergeom_upper(0, 10, 4, 5) == 1.0
    assert hypergeom_upper(4, 10, 4, 10) == 1.0
    assert hypergeom_upper(5, 10, 4, 5) == 0.0
    with pytest.raises(ValueError):
        hypergeom_upper(1, 5, 6, 2)


def test_bh_hand_values():
    # sorted p times 4/rank: .04, .06, .04*4/3, .20; step-up takes the running minimum from the end
    q = benjamini_hochberg([0.01, 0.04, 0.03, 0.20])
    assert np.allclose(q, [0.04, 0.16 / 3, 0.16 / 3, 0.20], rtol=0, atol=1e-15)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_bh_step_up_monotone(pvalues):
    p = np.array(pvalues)
    q = benjamini_hochberg(p)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(q[order]) >= 0)
    assert np.all(q >= p - 1e-15) and np.all(q <= 1.0)


def test_ora_example_and_fields():
    universe = [f"G{i}" for i in range(10)]
    coll = GeneSetCollection({"S": ["G0", "G1", "G2", "G3", "X99"], "T": ["G9"]})
    res = {r.gene_set: r for r in ora(["G0", "G1", "G2", "G7", "G8"], coll, universe, drug="d")}
    s = res["S"]
    assert (s.overlap, s.set_size, s.query_size, s.universe) == (3, 4, 5, 10)
    assert s.p == 66 / 252
    assert res["T"].overlap == 0 and res["T"].p == 1.0
    assert s.q == min(1.0, s.p * 2)


def test_ora_query_equals_universe():
    universe = ["A", "B", "C", "D"]
    for r in ora(universe, GeneSetCollection({"x": ["A", "B"], "y": ["C"]}), universe):
        assert r.overlap == r.set_size and r.p == 1.0


def test_ora_errors():
    coll = GeneSetCollection({"x": ["A"]})
    with pytest.raises(ValueError, match="empty"):
        ora([], coll, ["A"])
    with pytest.raises(ValueError, match="outside"):
        ora(["Z"], coll, ["A"])


def write(tmp_path, text, name="sets.gmt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_gmt(tmp_path):
    coll = parse_gmt(write(tmp_path, "HALLMARK_A\turl\tTp53\tMYC\tmyc\nHALLMARK_B\t\tEGFR\n"))
    assert len(coll) == 2 and coll.sets["HALLMARK_A"] == ["TP53", "MYC"]
    assert coll.source == "sets"


@pytest.mark.parametrize("text", ["", "ONLY\tdesc\n", "S\tdesc\t \t\n"])
def test_parse_gmt_errors(tmp_path, text):
    with pytest.raises(ValueError):
        parse_gmt(write(tmp_path, text))


def test_rank_ties_and_scale():
    ranked = rank_genes({"B": 0.3, "A": 0.3, "C": 0.4}, known=["A"])
    assert [r.gene for r in ranked] == ["C", "A", "B"]
    assert [r.rank for r in ranked] == [1, 2, 3] and ranked[1].known
    scaled = rank_genes({"B": 0.9, "A": 0.9, "C": 1.2})
    assert [r.gene for r in scaled] == ["C", "A", "B"]


def test_head_mean():
    assert head_mean(np.array([[0.2], [0.4]]))[0] == pytest.approx(0.3)


def test_top_k():
    rep = AttentionReport({"d": rank_genes({"A": 0.1, "B": 0.5, "C": 0.2})})
    assert top_k(rep, "d", 1) == ["B"]
    assert top_k(rep, "d", 3) == ["B", "C", "A"]
    with pytest.warns(UserWarning):
        assert top_k(rep, "d", 10) == ["B", "C", "A"]
    with pytest.raises(ValueError):
        top_k(rep, "d", 0)


def test_single_gene_edge_gets_full_attention():
    g = assemble(1, 1, 1, BlockEdges(DRUG, GENE, [0], [0], [0.5]), BlockEdges(CELL, GENE, [0], [0], [1.0]))
    model = GTModel(CFG, 1, 1, 1)
    rep = extract_ac(model, g, Features(np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1))), ["d"], ["G"])
    assert rep.ranking["d"][0].score == 1.0


def trained_setup():
    data = tiny_dataset(n=4, m=3, l=6, seed=1)
    f = build_features(data)
    model = GTModel(CFG, 4, 3, 6)
    train(model, build_graph(data), f, data.labels)
    return data, f, model, build_graph(data, dg_mode="interpret")


def test_extract_ac_deterministic_and_bounded():
    data, f, model, gi = trained_setup()
    model.train_mode()
    a = extract_ac(model, gi, f, data.drugs, data.genes, data.dti.known)
    b = extract_ac(model, gi, f, data.drugs, data.genes, data.dti.known)
    assert model.training  # mode restored
    for d in data.drugs:
        assert [(r.gene, r.score) for r in a.ranking[d]] == [(r.gene, r.score) for r in b.ranking[d]]
        scores = [r.score for r in a.ranking[d]]
        assert len(scores) == len(data.genes)
        assert all(s >= 0 for s in scores) and sum(scores) <= 1 + 1e-9
        assert scores == sorted(scores, reverse=True)
        known = {data.genes[j] for j in np.flatnonzero(data.dti.known[data.drugs.index(d)])}
        assert {r.gene for r in a.ranking[d] if r.known} == known
    assert a.layer == 1 and a.split == "validation"


def test_extract_ac_rejects_bad_layer():
    data, f, model, gi = trained_setup()
    with pytest.raises(ValueError):
        extract_ac(model, gi, f, data.drugs, data.genes, layer=5)


def test_report_file(tmp_path):
    data, f, model, gi = trained_setup()
    rep = extract_ac(model, gi, f, data.drugs, data.genes, data.dti.known)
    rep.write(tmp_path / "ac.tsv", renormalized=True)
    lines = (tmp_path / "ac.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["drug", "gene", "score", "rank", "known_dti", "renormalized"]
    assert len(lines) == 1 + 4 * 6


def result(drug, gene_set, q):
    return EnrichmentResult(drug, gene_set, 1, 1, 1, 1, q, q)


def test_moa_summary_counts():
    results = [result("a", "S1", 0.01), result("a", "S2", 0.02), result("b", "S1", 0.5), result("c", "S1", 0.001)]
    summary = moa_summary(results, {"a": "kinase"})
    assert summary.counts == {"S1": {"kinase": 1, "other": 1}, "S2": {"kinase": 1}}
    assert summary.total("S1") <= 3
    assert moa_summary([result("a", "S1", 0.9)], {}).rows() == []


def test_read_moa(tmp_path):
    p = write(tmp_path, "drug\tmoa\nD1\tkinase inhibitor\nD2\tDNA\n", "moa.tsv")
    assert read_moa(p) == {"D1": "kinase inhibitor", "D2": "DNA"}
