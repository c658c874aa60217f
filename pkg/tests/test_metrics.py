import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vox2seg.metrics import (HD95_EMPTY, METRICS, aggregate, dice, evaluate, hd95, remap_regions,
                             write_report)

label_maps = arrays(np.uint8, st.tuples(*[st.integers(1, 6)] * 3),
                    elements=st.sampled_from([0, 1, 2, 4]))


# ---------------------------------------------------------------- brute-force oracles


def dice_oracle(a: np.ndarray, b: np.ndarray) -> float:
    na = nb = both = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        na += bool(x)
        nb += bool(y)
        both += bool(x) and bool(y)
    if na + nb == 0:
        return 1.0
    return 2.0 * both / (na + nb)


def _percentile_linear(values: list[float], q: float) -> float:
    s = sorted(values)
    pos = (len(s) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def hd95_oracle(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    pa = [tuple(p) for p in np.argwhere(a)]
    pb = [tuple(p) for p in np.argwhere(b)]
    if not pa and not pb:
        return 0.0
    if not pa or not pb:
        return HD95_EMPTY

    def directed(src, dst):
        out = []
        for p in src:
            best = min(math.sqrt(sum(((p[i] - q[i]) * spacing[i]) ** 2 for i in range(3))) for q in dst)
            out.append(best)
        return _percentile_linear(out, 95)

    return max(directed(pa, pb), directed(pb, pa))


def _random_pair(rng):
    shape = tuple(int(s) for s in rng.integers(1, 9, size=3))
    density_a, density_b = rng.uniform(0.02, 0.5, size=2)
    return rng.random(shape) < density_a, rng.random(shape) < density_b


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for i in range(200):
        a, b = _random_pair(rng)
        spacing = (1.0, 1.0, 1.0) if i % 2 else tuple(rng.uniform(0.5, 2.0, size=3))
        assert abs(dice(a, b) - dice_oracle(a, b)) <= 1e-9
        assert abs(hd95(a, b, spacing) - hd95_oracle(a, b, spacing)) <= 1e-9


# ---------------------------------------------------------------- regions


def test_region_counts():
    m = np.zeros((3, 3, 3), dtype=np.uint8)
    m[0, 0, 0], m[1, 1, 1], m[2, 2, 2] = 1, 2, 4
    wt, tc, et = remap_regions(m)
    assert (wt.sum(), tc.sum(), et.sum()) == (3, 2, 1)
    assert not any(r.any() for r in remap_regions(np.zeros((3, 3, 3), np.uint8)))


def test_region_nesting_random_maps():
    rng = np.random.default_rng(1)
    for _ in range(100):
        m = rng.choice([0, 1, 2, 4], size=tuple(rng.integers(1, 9, size=3))).astype(np.uint8)
        wt, tc, et = remap_regions(m)
        assert np.all(tc[et]) and np.all(wt[tc])


# ---------------------------------------------------------------- dice / hd95 examples


def test_dice_examples():
    a = np.zeros((4, 4, 4), bool)
    a[0, 0, :2] = True
    b = np.zeros_like(a)
    b[0, 0, 0] = True
    assert dice(a, a) == 1.0
    assert dice(a, b) == pytest.approx(2 / 3)
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0


def test_hd95_examples():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros_like(a)
    a[1, 2, 2] = True
    b[4, 2, 2] = True
    assert hd95(a, a) == 0.0
    assert hd95(a, b) == pytest.approx(3.0)
    assert hd95(a, b, spacing=(2.0, 1.0, 1.0)) == pytest.approx(6.0)
    assert hd95(np.zeros_like(a), b) == HD95_EMPTY
    assert hd95(np.zeros_like(a), np.zeros_like(a)) == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 3), bool))
    with pytest.raises(ValueError):
        hd95(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 3), bool))
    with pytest.raises(ValueError):
        evaluate(np.zeros((2, 2, 2), np.uint8), np.zeros((2, 2, 3), np.uint8))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_symmetry_and_ranges(seed):
    a, b = _random_pair(np.random.default_rng(seed))
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0
    assert hd95(a, b) == hd95(b, a)
    assert hd95(a, b) >= 0


# ---------------------------------------------------------------- evaluate


def evaluate_oracle(pred, gt):
    def regions(m):
        flat = m.ravel().tolist()
        return {
            "WT": np.array([v in (1, 2, 4) for v in flat]).reshape(m.shape),
            "TC": np.array([v in (1, 4) for v in flat]).reshape(m.shape),
            "ET": np.array([v == 4 for v in flat]).reshape(m.shape),
        }

    rp, rg = regions(pred), regions(gt)
    out = {}
    for r in ("WT", "TC", "ET"):
        out[f"dice_{r}"] = dice_oracle(rp[r], rg[r])
        out[f"hd95_{r}"] = hd95_oracle(rp[r], rg[r])
    return out


def test_evaluate_matches_naive():
    rng = np.random.default_rng(2)
    for _ in range(10):
        pred = rng.choice([0, 1, 2, 4], size=(8, 8, 8), p=[0.7, 0.1, 0.1, 0.1]).astype(np.uint8)
        gt = rng.choice([0, 1, 2, 4], size=(8, 8, 8), p=[0.7, 0.1, 0.1, 0.1]).astype(np.uint8)
        got, expect = evaluate(pred, gt), evaluate_oracle(pred, gt)
        for k in METRICS:
            assert abs(got[k] - expect[k]) <= 1e-9


def test_evaluate_identity_and_empty_prediction(phantom_32):
    from vox2seg.data_io import generate_phantom

    _, gt = generate_phantom(phantom_32)
    same = evaluate(gt, gt)
    assert all(same[f"dice_{r}"] == 1.0 and same[f"hd95_{r}"] == 0.0 for r in ("WT", "TC", "ET"))
    empty = evaluate(np.zeros_like(gt), gt)
    assert all(empty[f"dice_{r}"] == 0.0 and empty[f"hd95_{r}"] == HD95_EMPTY for r in ("WT", "TC", "ET"))


# ---------------------------------------------------------------- aggregation


def _record(v: float) -> dict:
    return {k: v for k in METRICS}


def test_aggregate_two_records():
    rep = aggregate([_record(0.8), _record(0.9)])
    for k in METRICS:
        assert rep.mean[k] == pytest.approx(0.85)
        assert rep.median[k] == pytest.approx(0.85)
        assert rep.std[k] == pytest.approx(0.0707, abs=1e-4)


def test_aggregate_single_record():
    rep = aggregate([_record(0.3)])
    assert all(rep.mean[k] == rep.median[k] == 0.3 and rep.std[k] == 0.0 for k in METRICS)


def test_aggregate_empty():
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_order_invariant():
    rng = np.random.default_rng(3)
    records = [{k: float(rng.random()) for k in METRICS} for _ in range(7)]
    a = aggregate(records)
    b = aggregate(list(reversed(records)))
    for k in METRICS:
        assert a.mean[k] == pytest.approx(b.mean[k], abs=1e-12)
        assert a.std[k] == pytest.approx(b.std[k], abs=1e-12)
        assert a.median[k] == b.median[k]


def test_report_file_and_table(tmp_path):
    rep = aggregate([dict(_record(0.5), subject="a"), dict(_record(0.7), subject="b")])
    write_report(tmp_path / "r.json", rep)
    data = json.loads((tmp_path / "r.json").read_text())
    assert [r["subject"] for r in data["subjects"]] == ["a", "b"]
    assert data["aggregate"]["mean"]["dice_WT"] == pytest.approx(0.6)
    lines = rep.table().splitlines()
    assert [ln.split()[0] for ln in lines[1:]] == ["Mean", "StdDev", "Median"]
    assert "60.00" in lines[1]


@settings(max_examples=30, deadline=None)
@given(label_maps)
def test_evaluate_ranges(m):
    rec = evaluate(m, np.roll(m, 1, axis=0))
    for r in ("WT", "TC", "ET"):
        assert 0 <= rec[f"dice_{r}"] <= 1
        assert rec[f"hd95_{r}"] >= 0
