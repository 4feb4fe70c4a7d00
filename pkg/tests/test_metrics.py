"""Dice, volume similarity, fold aggregation and report tables."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from echosynth.metrics import (
    AggregateRow,
    HEART_VOLUME,
    StructureScores,
    aggregate,
    dice,
    format_mean_std,
    report_tables,
    rows_csv,
    score_case,
    scores_csv,
    volume_similarity,
)
from echosynth.volume import LA, LV, MYO, LabelVolume

# reported per-fold validation Dice and the mean +- std printed next to them
FOLD_FIXTURES = {
    ("M_Synthetic", "LV"): ([0.924, 0.930, 0.924, 0.918, 0.934], "0.926 ± 0.006"),
    ("M_Synthetic", "MYO"): ([0.824, 0.822, 0.794, 0.784, 0.816], "0.808 ± 0.016"),
    ("M_Real", "LV"): ([0.933, 0.932, 0.950, 0.930, 0.943], "0.938 ± 0.008"),
}


def _lab(a):
    return LabelVolume(np.asarray(a, dtype=np.uint8))


# ---------------------------------------------------------------------------
# brute-force oracles: explicit loops over voxels
# ---------------------------------------------------------------------------


def dice_oracle(a, b, c):
    na = nb = both = 0
    for x in range(a.shape[0]):
        for y in range(a.shape[1]):
            for z in range(a.shape[2]):
                ia, ib = a[x, y, z] == c, b[x, y, z] == c
                na += ia
                nb += ib
                both += ia and ib
    return 1.0 if na + nb == 0 else 2.0 * both / (na + nb)


def vs_oracle(a, b, classes=(LV, LA, MYO)):
    na = nb = 0
    for x in range(a.shape[0]):
        for y in range(a.shape[1]):
            for z in range(a.shape[2]):
                na += a[x, y, z] in classes
                nb += b[x, y, z] in classes
    return 1.0 if na + nb == 0 else 1.0 - abs(na - nb) / (na + nb)


def random_pairs(n=100, shape=(16, 16, 16), seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        # vary the class balance so near-empty and dense masks both occur
        p = rng.dirichlet(np.ones(4) * rng.uniform(0.2, 3))
        yield (rng.choice(4, shape, p=p).astype(np.uint8), rng.choice(4, shape, p=p).astype(np.uint8))


def oracle_mismatches(pairs):
    bad = []
    for i, (a, b) in enumerate(pairs):
        la, lb = _lab(a), _lab(b)
        for c in (LV, LA, MYO):
            if dice(la, lb, c) != dice_oracle(a, b, c):
                bad.append((i, "dice", c))
        vs = volume_similarity(la, lb)
        if vs != vs_oracle(a, b):
            bad.append((i, "vs"))
        # the ordering holds per region: VS and Dice over the same class
        for c in (LV, LA, MYO):
            if volume_similarity(la, lb, c) < dice(la, lb, c):
                bad.append((i, "vs<dice", c))
    return bad


# ---------------------------------------------------------------------------
# dice / vs
# ---------------------------------------------------------------------------


def test_dice_examples():
    a = np.zeros((6, 4, 4), np.uint8)
    a[1:3, 1:3, 1:3] = LV
    assert dice(_lab(a), _lab(a), LV) == 1.0
    b = np.roll(a, 1, axis=0)
    assert dice(_lab(a), _lab(b), LV) == 0.5
    c = np.roll(a, 3, axis=0)
    assert dice(_lab(a), _lab(c), LV) == 0.0
    assert dice(_lab(a), _lab(a), LA) == 1.0  # both empty


def test_vs_examples():
    a, b = np.zeros(200, np.uint8), np.zeros(200, np.uint8)
    a[:120], b[-80:] = LV, MYO
    shape = (10, 10, 2)
    assert volume_similarity(_lab(a.reshape(shape)), _lab(b.reshape(shape))) == pytest.approx(0.8, abs=1e-15)
    a[:] = 0
    a[:100] = LA
    assert volume_similarity(_lab(a.reshape(shape)), _lab(np.zeros(shape, np.uint8))) == 0.0
    # equal sizes at different positions
    x, y = np.zeros(shape, np.uint8), np.zeros(shape, np.uint8)
    x[0], y[-1] = LV, LV
    assert volume_similarity(_lab(x), _lab(y)) == 1.0
    assert dice(_lab(x), _lab(y), LV) == 0.0


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape mismatch"):
        dice(_lab(np.zeros((2, 2, 2))), _lab(np.zeros((2, 2, 3))), LV)
    with pytest.raises(ValueError, match="shape mismatch"):
        volume_similarity(_lab(np.zeros((2, 2, 2))), _lab(np.zeros((2, 2, 3))))


def test_metrics_match_voxel_loop_oracle():
    assert oracle_mismatches(random_pairs()) == []


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), c=st.sampled_from([LV, LA, MYO]))
def test_permutation_invariance(seed, c):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 4, (4, 5, 3)), rng.integers(0, 4, (4, 5, 3))
    perm = rng.permutation(a.size)
    pa, pb = a.reshape(-1)[perm].reshape(a.shape), b.reshape(-1)[perm].reshape(b.shape)
    assert dice(_lab(a), _lab(b), c) == dice(_lab(pa), _lab(pb), c)
    assert volume_similarity(_lab(a), _lab(b)) == volume_similarity(_lab(pa), _lab(pb))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), c=st.sampled_from([LV, LA, MYO]))
def test_dice_one_iff_identical(seed, c):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 4, (3, 3, 3))
    b = a.copy()
    assert dice(_lab(a), _lab(b), c) == 1.0
    b.reshape(-1)[rng.integers(b.size)] = c
    b.reshape(-1)[rng.integers(b.size)] = 0
    same = np.array_equal(a == c, b == c)
    assert (dice(_lab(a), _lab(b), c) == 1.0) == same


def test_score_case():
    a = np.zeros((4, 4, 4), np.uint8)
    a[:2] = LV
    s = score_case(_lab(a), _lab(a), "case0")
    assert s.dice == {"LV": 1.0, "LA": 1.0, "MYO": 1.0} and s.vs == 1.0
    with pytest.raises(ValueError):
        StructureScores("x", {"LV": 1.2})


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("key", list(FOLD_FIXTURES))
def test_aggregate_reported_fold_fixtures(key):
    folds, expected = FOLD_FIXTURES[key]
    mu, sd = aggregate(folds)
    assert format_mean_std(mu, sd) == expected
    assert abs(mu - float(expected.split(" ± ")[0])) <= 0.0005


def test_population_std_convention():
    folds, _ = FOLD_FIXTURES[("M_Synthetic", "MYO")]
    _, sd = aggregate(folds)
    assert sd == pytest.approx(np.std(folds, ddof=0), abs=1e-15)
    assert round(float(np.std(folds, ddof=1)), 3) == 0.018  # the other convention misses
    assert aggregate([0.5]) == (0.5, 0.0)
    with pytest.raises(ValueError):
        aggregate([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.randoms(use_true_random=False))
def test_aggregate_permutation_invariant(xs, r):
    ys = list(xs)
    r.shuffle(ys)
    assert aggregate(xs) == aggregate(ys)


# ---------------------------------------------------------------------------
# tables and csv
# ---------------------------------------------------------------------------


def _fixture_rows():
    return [AggregateRow.from_scores(m, s, folds) for (m, s), (folds, _) in FOLD_FIXTURES.items()]


def test_report_cells_and_best_flag():
    rows = _fixture_rows() + [AggregateRow.from_scores("M_Real", "MYO", [0.710, 0.699, 0.766, 0.697, 0.750])]
    table = report_tables(rows, "validation")
    lines = table.splitlines()
    assert lines[0].split("|")[1].strip() == "M_Synthetic"
    lv = next(l for l in lines if l.startswith("LV"))
    assert "0.926 ± 0.006 " in lv and "0.938 ± 0.008*" in lv
    myo = next(l for l in lines if l.startswith("MYO"))
    assert "0.808 ± 0.016*" in myo


def test_single_cell_table():
    table = report_tables([AggregateRow("M_X", "LV", 0.5, 0.1, 5)])
    assert table.splitlines()[-1].rstrip().endswith("0.500 ± 0.100*")


def test_missing_cell_and_layout_errors():
    rows = _fixture_rows()  # M_Real has no MYO cell
    with pytest.raises(ValueError, match="missing cell: model 'M_Real'"):
        report_tables(rows)
    ok = [AggregateRow("M_A", "LV", 0.9, 0.0, 1)]
    with pytest.raises(ValueError, match="volume-similarity"):
        report_tables(ok, "test")
    with pytest.raises(ValueError):
        report_tables(ok, "appendix")
    t = report_tables(ok + [AggregateRow("M_A", HEART_VOLUME, 0.95, 0.0, 1, metric="vs")], "test")
    assert "VS Heart Volume" in t


def test_csv_exports():
    text = rows_csv([AggregateRow("M_A", "LV", 0.9, 0.01, 5)])
    assert text.splitlines() == ["model,metric,structure,mean,std,n", "M_A,dice,LV,0.9,0.01,5"]
    s = scores_csv("M_A", [StructureScores("c0", {"LV": 1.0, "LA": 0.5, "MYO": 0.25}, 0.75)])
    assert s.splitlines()[-1] == "M_A,c0,Heart Volume,,0.75"
