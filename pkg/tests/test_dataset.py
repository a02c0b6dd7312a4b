import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from drgt.dataset import (DtiMatrix, ExpressionMatrix, ProcessedDataset, ResponseMatrix, load_matrices,
                          load_response, prepare, preprocess_classification, preprocess_regression, select_genes,
                          to_ic50_matrix)
from drgt.fixture import make_synthetic_fixture

NO_FILTER = (0.0, 100.0)


def one_drug(log_values):
    ic50 = 10.0 ** np.asarray(log_values, dtype=float)
    return ResponseMatrix.from_array(["d"], [f"c{j}" for j in range(len(ic50))], ic50[None, :])


def labels_by_cell(lab):
    return {lab.cells[c]: v for (_, c), v in zip(lab.pairs.tolist(), lab.values)}


# ------------------------------------------------------------ classification

def test_margin_rule_hand_case():
    # mean 0; population std sqrt(5/6) ~ 0.913
    x = [-1.5, 1.5, -0.5, 0.5, 0.0, 0.0]
    lab = preprocess_classification(one_drug(x), percentiles=NO_FILTER)
    assert labels_by_cell(lab) == {"c0": 1.0, "c1": 0.0}


def test_margin_rule_unit_std():
    # six values with mean 0 and population std exactly 1
    c = math.sqrt(0.5)
    x = [-1.5, 1.5, -0.5, 0.5, c, -c]
    assert np.std(x) == pytest.approx(1.0)
    lab = preprocess_classification(one_drug(x), percentiles=NO_FILTER)
    assert labels_by_cell(lab) == {"c0": 1.0, "c1": 0.0}


def test_margin_boundaries_are_strict():
    # mean 0, population std 1: both values sit exactly on a boundary
    lab = preprocess_classification(one_drug([-1.0, 1.0]), percentiles=NO_FILTER)
    assert len(lab) == 0


def test_equal_values_all_uncertain():
    assert len(preprocess_classification(one_drug([0.3, 0.3, 0.3]), percentiles=NO_FILTER)) == 0


def test_drug_with_one_observation_dropped():
    vals = np.array([[1e-6, np.nan, np.nan], [1e-6, 1e-3, 1e-9]])
    resp = ResponseMatrix.from_array(["a", "b"], ["x", "y", "z"], vals)
    lab = preprocess_classification(resp, percentiles=NO_FILTER)
    assert set(lab.pairs[:, 0].tolist()) <= {1}


def test_global_percentile_filter_drops_extremes():
    rng = np.random.default_rng(0)
    logv = rng.normal(size=(5, 40))
    resp = ResponseMatrix.from_array([f"d{i}" for i in range(5)], [f"c{j}" for j in range(40)], 10.0 ** logv)
    lo, hi = np.percentile(logv, [2.5, 97.5])
    lab = preprocess_classification(resp)
    kept = logv[lab.pairs[:, 0], lab.pairs[:, 1]]
    assert kept.min() >= lo and kept.max() <= hi
    assert set(np.unique(lab.values)) <= {0.0, 1.0}


@given(st.lists(st.floats(-4, 4), min_size=3, max_size=12),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_labels_invariant_under_positive_affine(x, scale, shift):
    x = np.array(x)
    mu, sd = x.mean(), x.std()
    assume(sd > 1e-3)
    # skip draws whose values sit within round-off of a margin boundary
    assume(np.all(np.abs(np.abs(x - mu) - sd) > 1e-6 * (1 + abs(mu) + sd)))
    a = preprocess_classification(one_drug(x), percentiles=NO_FILTER)
    b = preprocess_classification(one_drug(scale * x + shift), percentiles=NO_FILTER)
    assert labels_by_cell(a) == labels_by_cell(b)


# ---------------------------------------------------------------- regression

def regression_row(values):
    values = list(values)
    return ResponseMatrix.from_array(["d"], [f"c{j}" for j in range(len(values))], np.array([values], float))


def test_pic50_log_identity_and_clip():
    lab = preprocess_regression(regression_row([1.0, 1e-20, 1e3] + [1e-6] * 8))
    vals = labels_by_cell(lab)
    assert vals["c0"] == 0.0
    assert vals["c1"] == 15.0
    assert vals["c2"] == 0.0  # -3 clipped up to 0
    assert vals["c3"] == pytest.approx(6.0)


def test_zero_and_infinite_dropped():
    lab = preprocess_regression(regression_row([0.0, np.inf] + [1e-5] * 10))
    assert set(labels_by_cell(lab)) == {f"c{j}" for j in range(2, 12)}


def test_min_ten_measurements():
    assert len(preprocess_regression(regression_row([1e-6] * 9 + [np.nan, 0.0]))) == 0
    assert len(preprocess_regression(regression_row([1e-6] * 10))) == 10


@given(st.lists(st.one_of(st.floats(1e-25, 1e5), st.just(0.0), st.just(np.inf), st.just(np.nan)),
                min_size=8, max_size=20))
def test_regression_idempotent(values):
    resp = regression_row(values)
    once = preprocess_regression(resp)
    twice = preprocess_regression(to_ic50_matrix(once))
    assert np.array_equal(once.pairs, twice.pairs)
    assert np.allclose(once.values, twice.values, rtol=0, atol=1e-12)
    assert np.all((once.values >= 0) & (once.values <= 15))


# ----------------------------------------------------------- gene selection

def expr_dti(var_profile, dti_genes=(), n_cells=6, names=None):
    l = len(var_profile)
    names = names or [f"G{k}" for k in range(l)]
    base = np.array([-1.0, 1.0] * (n_cells // 2))
    values = np.outer(base, np.sqrt(var_profile))
    known = np.zeros((1, l), bool)
    for g in dti_genes:
        known[0, names.index(g)] = True
    return ExpressionMatrix([f"c{i}" for i in range(n_cells)], names, values), DtiMatrix(["d"], names, known)


def test_select_single_high_variance_gene():
    e, d = expr_dti([0] * 4 + [100] + [0] * 5)
    assert select_genes(e, d).tolist() == [4]


def test_dti_gene_with_zero_variance_kept():
    e, d = expr_dti([0] * 4 + [100] + [0] * 5, dti_genes=["G7"])
    assert select_genes(e, d).tolist() == [4, 7]


def test_equal_variance_tie_break_by_identifier():
    names = ["Z1", "B2", "A3", "M4", "K5", "C6", "Y7", "Q8", "E9", "R0", "H1", "P2"]
    e, d = expr_dti([1.0] * 12, names=names)
    # ceil(0.1 * 12) = 2 genes: the two smallest identifiers
    chosen = [names[j] for j in select_genes(e, d)]
    assert sorted(chosen) == ["A3", "B2"]


def test_gene_axes_identical_after_prepare():
    fx = make_synthetic_fixture(12, 10, 30, seed=3)
    ds = prepare(fx.bundle, "classification")
    assert ds.expression.genes == ds.dti.genes
    assert ds.dti.known.any(axis=0).sum() <= len(ds.genes)


# ------------------------------------------------------------------ loading

def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture
def raw_files(tmp_path):
    resp = write(tmp_path / "resp.csv", "drug,c1,c2,c3\nd1,1e-6,2e-6,\nd2,3e-6,,4e-6\nd3,1e-5,1e-5,1e-5\n")
    expr = write(tmp_path / "expr.tsv", "cell\tg1\tg2\tg3\nc1\t1\t2\t3\nc2\t2\t2\t1\nc3\t0\t5\t1\nc9\t1\t1\t1\n")
    dti = write(tmp_path / "dti.tsv", "drug\tgene\nd1\tG1\nd2\tgX\n")
    fps = write(tmp_path / "fp.csv", "drug_id,b0,b1\nd1,1,0\nd2,0,1\n")
    return resp, expr, dti, fps


def test_alignment_drops_and_reports(raw_files):
    b = load_matrices(*raw_files)
    assert b.response.drugs == ["d1", "d2"]
    assert "d3" in b.report.dropped_drugs
    assert "c9" in b.report.dropped_cells
    assert b.report.dropped_genes == ["GX"]
    assert b.dti.genes == b.expression.genes == ["G1", "G2", "G3"]
    assert b.dti.known.tolist() == [[True, False, False], [False, False, False]]


def test_identical_loads_identical(raw_files):
    a, b = load_matrices(*raw_files), load_matrices(*raw_files)
    assert np.array_equal(a.response.values, b.response.values, equal_nan=True)
    assert np.array_equal(a.expression.values, b.expression.values)
    assert np.array_equal(a.dti.known, b.dti.known)


def test_missing_file(raw_files, tmp_path):
    with pytest.raises(FileNotFoundError):
        load_matrices(tmp_path / "nope.csv", *raw_files[1:])


def test_malformed_cell(raw_files, tmp_path):
    bad = write(tmp_path / "bad.csv", "drug,c1\nd1,abc\n")
    with pytest.raises(ValueError, match="malformed"):
        load_matrices(bad, *raw_files[1:])


def test_empty_intersection(raw_files, tmp_path):
    fp = write(tmp_path / "fp2.csv", "drug_id,b0\nzz,1\n")
    with pytest.raises(ValueError, match="empty intersection"):
        load_matrices(*raw_files[:3], fp)


def test_long_format_duplicates_averaged(tmp_path):
    p = write(tmp_path / "long.tsv", "drug\tcell\tic50\nd1\tc1\t1e-6\nd1\tc1\t3e-6\nd2\tc1\t5e-6\n")
    r = load_response(p)
    assert r.values[0, 0] == pytest.approx(2e-6)
    assert r.values.shape == (2, 1)


def test_no_surviving_labels_rejected():
    fx = make_synthetic_fixture(6, 8, 20, seed=1)
    with pytest.raises(ValueError, match="no labelled"):
        prepare(fx.bundle, "regression")


def test_processed_round_trip(tmp_path):
    fx = make_synthetic_fixture(10, 16, 20, seed=1)
    ds = prepare(fx.bundle, "regression")
    assert len(ds.labels) > 0
    ds.save(tmp_path / "p")
    back = ProcessedDataset.load(tmp_path / "p")
    assert back.drugs == ds.drugs and back.cells == ds.cells and back.genes == ds.genes
    assert np.array_equal(back.labels.pairs, ds.labels.pairs)
    assert np.array_equal(back.labels.values, ds.labels.values)
    assert np.array_equal(back.expression.values, ds.expression.values)
    assert [r for r in (tmp_path / "p" / "stats.tsv").read_text().splitlines()][1:] == \
        [f"{k}\t{v}" for k, v in ds.stats()]
