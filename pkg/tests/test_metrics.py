import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gputrack.metrics import (
    compute_ata,
    compute_fda,
    compute_sfda,
    evaluate,
    hungarian_assign,
    overlap_ratio,
    pair_term,
    read_ground_truth,
    write_report,
)


def test_overlap_examples():
    assert overlap_ratio([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0
    assert overlap_ratio([0, 0, 10, 10], [20, 20, 30, 30]) == 0.0
    assert overlap_ratio([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(1 / 3, abs=1e-12)
    assert overlap_ratio([0, 0, 10, 10], [10, 0, 20, 10]) == 0.0


def test_hungarian_examples():
    pairs = hungarian_assign([[1, 2], [2, 4]])
    assert pairs == [(0, 1), (1, 0)]
    assert hungarian_assign(np.array([[0, 5, 5], [5, 0, 5], [5, 5, 0]])) == [(0, 0), (1, 1), (2, 2)]
    assert hungarian_assign(np.zeros((3, 3))) == [(0, 0), (1, 1), (2, 2)]
    assert hungarian_assign(np.zeros((0, 3))) == []


def _brute(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return _brute(cost.T)


@pytest.mark.parametrize("n", range(1, 8))
def test_hungarian_equals_brute_force(n):
    rng = np.random.default_rng(n)
    for trial in range(20 if n < 7 else 5):
        m = n if trial % 2 == 0 else int(rng.integers(1, 8))
        cost = rng.integers(0, 5, size=(n, m)).astype(float) if trial % 3 == 0 else rng.random((n, m))
        pairs = hungarian_assign(cost)
        assert len(pairs) == min(n, m)
        assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})
        assert sum(cost[i, j] for i, j in pairs) == pytest.approx(_brute(cost), abs=1e-12)


def test_fda_examples():
    box = [0, 0, 10, 10]
    assert compute_fda([box], [box]) == 1.0
    assert compute_fda([box], [[5, 0, 15, 10]]) == pytest.approx(1 / 3, abs=1e-12)
    assert compute_fda([box], [box, [50, 50, 60, 60]]) == pytest.approx(2 / 3, abs=1e-12)
    assert compute_fda([], []) == 1.0


def test_sfda_examples():
    box = [0, 0, 10, 10]
    gt = {"a": {1: box, 2: box}}
    assert compute_sfda(gt, {7: {1: box, 2: box}}) == 1.0
    # frames 1 and 2 active (FDA 1 and 0.5); frames 3..12 empty on both sides
    tr = {7: {1: box, 2: box}, 8: {2: [40, 40, 50, 50]}}
    gt2 = {"a": {1: box, 2: box}, "b": {2: [40, 40, 50, 50]}}
    tr2 = {7: {1: box, 2: box}}
    assert compute_sfda(gt2, tr2) == pytest.approx((1 + (1 / 1.5)) / 2, abs=1e-12)
    gt3 = {"a": {1: box, 2: box}}
    tr3 = {7: {1: box, 2: [5, 0, 15, 10]}}
    # second frame overlap 1/3
    assert compute_sfda(gt3, tr3) == pytest.approx((1 + 1 / 3) / 2, abs=1e-12)
    assert compute_sfda(gt, {}) == 0.0
    assert tr  # keep the constructed example referenced


def test_sfda_counts_only_active_frames():
    box = [0, 0, 10, 10]
    half = [0, 0, 10, 5]  # overlap 0.5
    gt = {"a": {1: box, 2: box}}
    tr = {"x": {1: box, 2: half}}
    assert compute_sfda(gt, tr) == pytest.approx(0.75, abs=1e-12)
    # adding ten frames with nothing in them changes nothing because they are not listed
    assert evaluate(gt, tr).sfda == pytest.approx(0.75, abs=1e-12)


def test_ata_examples():
    box = [0, 0, 10, 10]
    gt = {"a": {t: box for t in range(1, 11)}}
    stda, ata, mapping, _ = compute_ata(gt, {1: {t: box for t in range(1, 11)}})
    assert (stda, ata, mapping) == (1.0, 1.0, [("a", 1)])
    _, ata, _, terms = compute_ata(gt, {1: {t: box for t in range(1, 6)}})
    assert terms[("a", 1)] == pytest.approx(0.5, abs=1e-12) and ata == pytest.approx(0.5, abs=1e-12)
    gt2 = {"a": {1: box}, "b": {1: [50, 50, 60, 60]}}
    _, ata, mapping, _ = compute_ata(gt2, {1: {1: box}})
    assert ata == pytest.approx(2 / 3, abs=1e-12) and mapping == [("a", 1)]
    assert pair_term({}, {}) == 0.0


def test_report_fields(tmp_path):
    box = [0, 0, 10, 10]
    gt = {"a": {1: box}, "b": {1: [50, 50, 60, 60]}}
    rep = evaluate(gt, {1: {1: box}, 2: {1: [200, 200, 210, 210]}})
    assert rep.false_positive_tracks == [2] and rep.missed_gt == ["b"]
    write_report(tmp_path / "r.json", rep, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "frame,fda"


def test_read_ground_truth(tmp_path):
    (tmp_path / "g.json").write_text('{"objects": [{"id": "a", "boxes": {"3": [0, 0, 2, 2]}}]}')
    assert read_ground_truth(tmp_path / "g.json") == {"a": {3: [0.0, 0.0, 2.0, 2.0]}}
    (tmp_path / "h.json").write_text('{"objects": [{"id": "a", "boxes": {"3": [2, 0, 0, 2]}}]}')
    with pytest.raises(ValueError):
        read_ground_truth(tmp_path / "h.json")


box_st = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0.5, 30), st.floats(0.5, 30)).map(
    lambda b: [b[0], b[1], b[0] + b[2], b[1] + b[3]])
tracks_st = st.dictionaries(st.integers(0, 5), st.dictionaries(st.integers(1, 6), box_st, min_size=1, max_size=4),
                            max_size=4)


@settings(max_examples=60, deadline=None)
@given(tracks_st, tracks_st)
def test_metric_bounds(gt, tr):
    rep = evaluate(gt, tr)
    assert 0 <= rep.sfda <= 1 + 1e-12
    assert 0 <= rep.ata <= 1 + 1e-12
    for v in rep.fda_per_frame.values():
        assert 0 <= v <= 1 + 1e-12
    for v in rep.stda_terms.values():
        assert 0 <= v <= 1 + 1e-12
    gs = [g for g, _ in rep.mapping]
    ts = [t for _, t in rep.mapping]
    assert len(set(gs)) == len(gs) and len(set(ts)) == len(ts)


@settings(max_examples=40, deadline=None)
@given(tracks_st, tracks_st, st.randoms())
def test_metric_permutation_invariance(gt, tr, rnd):
    ids = list(tr)
    perm = ids[:]
    rnd.shuffle(perm)
    relabeled = {100 + perm.index(k): v for k, v in tr.items()}
    gids = list(gt)
    rnd.shuffle(gids)
    gt_relabeled = {f"g{gids.index(k)}": v for k, v in gt.items()}
    a = evaluate(gt, tr)
    b = evaluate(gt_relabeled, relabeled)
    assert a.sfda == pytest.approx(b.sfda, abs=1e-12)
    assert a.ata == pytest.approx(b.ata, abs=1e-12)
