import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from qcount.metrics import (
    EvalRecord,
    game,
    mae_rmse,
    make_record,
    prefix_overlap_ap,
    rank_map,
    read_metrics_csv,
    region_counts,
    similarity_summary,
    summarize,
    write_metrics_csv,
)


def counts_only(preds, gts, cls="kiwis"):
    return [EvalRecord(i, cls, float(g), float(p)) for i, (p, g) in enumerate(zip(preds, gts))]


@pytest.mark.parametrize(
    "preds, gts, expected",
    [((10, 20), (12, 18), (2.0, 2.0)), ((3, 7), (3, 7), (0.0, 0.0)), ((9,), (4,), (5.0, 5.0))],
)
def test_mae_rmse_examples(preds, gts, expected):
    assert mae_rmse(counts_only(preds, gts)) == expected


def test_empty_records_rejected():
    with pytest.raises(ValueError):
        mae_rmse([])
    with pytest.raises(ValueError):
        game([], 1)


def test_game_zero_is_mae():
    rng = np.random.default_rng(0)
    recs = [make_record(i, "a", rng.random((8, 8)), rng.random((8, 8))) for i in range(20)]
    assert game(recs, 0) == mae_rmse(recs)[0]


def test_game_wrong_quadrant():
    pred = np.zeros((4, 4))
    gt = np.zeros((4, 4))
    pred[0, 0] = 3.0
    gt[3, 3] = 3.0
    rec = make_record(0, "a", pred, gt, levels=(0, 1))
    assert game([rec], 0) == 0.0
    assert game([rec], 1) == 6.0


def test_game_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 4))
        preds = [rng.random((4, 4)) for _ in range(n)]
        gts = [rng.random((4, 4)) for _ in range(n)]
        recs = [make_record(i, "a", p, g, levels=(0, 1, 2)) for i, (p, g) in enumerate(zip(preds, gts))]
        for lvl in (0, 1, 2):
            want = oracles.game([p.tolist() for p in preds], [g.tolist() for g in gts], lvl)
            assert abs(game(recs, lvl) - want) <= 1e-6 * max(1.0, want)


def test_game_monotone_in_level():
    rng = np.random.default_rng(2)
    for i in range(100):
        pred = rng.random((16, 16)) * rng.random()
        gt = rng.random((16, 16))
        rec = make_record(i, "a", pred, gt, gt_count=float(gt.sum()))
        values = [game([rec], lvl) for lvl in range(4)]
        assert all(b >= a - 1e-9 for a, b in zip(values, values[1:]))


def test_region_counts_odd_split_and_too_fine():
    d = np.arange(25, dtype=float).reshape(5, 5)
    regions = region_counts(d, 1)
    assert regions.sum() == d.sum() and len(regions) == 4
    with pytest.raises(ValueError):
        region_counts(np.ones((2, 2)), 2)


def test_gt_count_rescales_regions():
    gt = np.full((4, 4), 0.5)
    rec = make_record(0, "a", np.zeros((4, 4)), gt, levels=(1,), gt_count=10.0)
    assert rec.gt_count == 10.0
    assert math.isclose(rec.regions[1][1].sum(), 10.0)


def test_missing_level_rejected():
    rec = make_record(0, "a", np.ones((4, 4)), np.ones((4, 4)), levels=(0,))
    with pytest.raises(ValueError):
        game([rec], 2)


def test_rank_map_identical_and_reversed():
    assert rank_map(counts_only([1, 2, 3, 4], [10, 20, 30, 40])) == 1.0
    assert rank_map(counts_only([2, 1], [1, 2])) == 0.5


def test_prefix_overlap_matches_bruteforce():
    rng = random.Random(4)
    for _ in range(100):
        gt = [rng.randint(0, 50) for _ in range(10)]
        pred = [rng.uniform(0, 50) for _ in range(10)]
        got = rank_map(counts_only(pred, gt))
        assert abs(got - oracles.prefix_overlap_ap(gt, pred)) <= 1e-12


def test_prefix_overlap_direct():
    assert prefix_overlap_ap([0, 1, 2], [2, 1, 0]) == pytest.approx((0 + 1 / 2 + 1) / 3)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 10), shift=st.floats(-5, 5))
def test_rank_map_invariant_to_monotone_transform(seed, scale, shift):
    rng = random.Random(seed)
    gt = [rng.randint(1, 30) for _ in range(8)]
    pred = [rng.uniform(0.5, 30) for _ in range(8)]
    warped = [math.exp(scale * math.log(p)) + shift for p in pred]
    # a strictly increasing transform can only merge values through rounding
    if len(set(warped)) == len(set(pred)):
        assert rank_map(counts_only(pred, gt)) == rank_map(counts_only(warped, gt))


def test_rank_map_skips_singleton_classes(caplog):
    recs = counts_only([1, 2], [1, 2], "a") + [EvalRecord(9, "b", 3.0, 1.0)]
    assert rank_map(recs) == 1.0
    assert "fewer than 2" in caplog.text
    with pytest.raises(ValueError):
        rank_map([EvalRecord(0, "a", 1.0, 1.0)])


def test_similarity_summary_ordering_and_mean():
    recs = [EvalRecord(2, "a", 1, 1, similarity=0.2), EvalRecord(0, "a", 1, 1, similarity=1.0),
            EvalRecord(1, "a", 1, 1)]
    values, mean = similarity_summary(recs)
    assert values == [1.0, 0.2]
    assert mean == pytest.approx(0.6)
    assert math.isnan(similarity_summary([EvalRecord(0, "a", 1, 1)])[1])


def test_summarize_keys():
    recs = [make_record(i, "a", np.full((8, 8), i / 64), np.full((8, 8), 0.1)) for i in range(3)]
    out = summarize(recs)
    assert set(out) == {"mae", "rmse", "game0", "game1", "game2", "game3", "rank_map", "similarity"}
    assert out["game0"] == out["mae"]


def test_metrics_csv_round_trip(tmp_path):
    rows = [("full", "val", "mae", 1.25), ("no_qtp", "val", "rank_map", 0.875)]
    write_metrics_csv(tmp_path / "m.csv", rows)
    assert read_metrics_csv(tmp_path / "m.csv") == rows
