import json
import math

import numpy as np
import pytest

from cloudmask.data import Raster
from cloudmask.errors import ConfigError, DataError, ShapeError
from cloudmask.evaluation import classify, compute_metrics, kappa_from_counts, masked_metrics, position_grid
from cloudmask.inference import (Classifier, accumulate_windows, aggregate_overlaps, bench_inference,
                                 predict_raster, tile_starts, valid_region)
from cloudmask.model import build_cloudnet

from oracles import confusion_loop


def tiny(output, patch=17, seed=0):
    return Classifier.from_network(*build_cloudnet(patch, output, seed, widths=(2, 2, 3, 3), hidden=4))


def scene(rng, w=40, h=36):
    return Raster(rng.uniform(0, 1, (4, h, w)).astype(np.float32), rng.integers(0, 2, (h, w)).astype(np.uint8))


def test_classify():
    assert classify([0.5, 0.49, 0.51, 0.0, 1.0]).tolist() == [1, 0, 1, 0, 1]
    assert classify([0.0, 0.3], threshold=0).tolist() == [1, 1]


def test_perfect_agreement():
    r = compute_metrics([0, 1, 1, 0], [0, 1, 1, 0])
    assert r.oa == 1 and r.kappa == 1


def test_worked_example():
    pred = [1] * 40 + [0] * 10 + [1] * 5 + [0] * 45
    truth = [1] * 50 + [0] * 50
    r = compute_metrics(pred, truth)
    assert (r.tp, r.fn, r.fp, r.tn) == (40, 10, 5, 45)
    assert r.oa == pytest.approx(0.85, abs=1e-12)
    assert r.kappa == pytest.approx(0.70, abs=1e-12)
    # p_e straight from the marginals
    pe = 0.45 * 0.5 + 0.55 * 0.5
    assert (0.85 - pe) / (1 - pe) == pytest.approx(r.kappa, abs=1e-12)


def test_constant_prediction_kappa_zero():
    assert compute_metrics([1] * 10, [0, 1] * 5).kappa == pytest.approx(0.0, abs=1e-15)
    assert compute_metrics([0] * 10, [0] * 10).kappa == 0.0
    assert kappa_from_counts(10, 0, 0, 0) == (1.0, 0.0)


def test_brute_force_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(1, 60))
        pred = rng.integers(0, 2, n)
        truth = rng.integers(0, 2, n)
        counts, po, kappa = confusion_loop(pred, truth)
        r = compute_metrics(pred, truth)
        assert (r.tn, r.fp, r.fn, r.tp) == counts
        assert abs(r.oa - po) <= 1e-12 and abs(r.kappa - kappa) <= 1e-12
        assert -1 <= r.kappa <= 1
        assert r.total == n


def test_metric_errors():
    with pytest.raises(ShapeError):
        compute_metrics([0, 1], [0])
    with pytest.raises(DataError):
        compute_metrics([], [])


def test_report_json(tmp_path):
    r = compute_metrics([0, 1, 1], [0, 1, 0])
    r.grid = np.ones((9, 9))
    r.timing = {"mean_s": 0.1, "std_s": 0.0, "batches": 10, "threads": 1}
    r.save(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert set(d) >= {"confusion", "oa", "kappa", "grid", "timing"}
    assert d["confusion"] == {"tn": 1, "fp": 1, "fn": 0, "tp": 1} and len(d["grid"]) == 81


def test_masked_metrics():
    truth = np.array([[0, 1, 255], [1, 0, 1]], np.uint8)
    pred = np.array([[0, 1, 1], [255, 0, 0]], np.uint8)
    r = masked_metrics(pred, truth)
    assert r.total == 4 and (r.tn, r.tp, r.fn) == (2, 1, 1)


def test_grid_cases(rng):
    truth = rng.integers(0, 2, (5, 9, 9))
    assert np.all(position_grid(truth, truth) == 1.0)
    one = truth[:1].copy()
    wrong = one.copy()
    wrong[0, 4, 4] ^= 1
    grid = position_grid(wrong, one)
    assert grid[4, 4] == 0.0 and grid.sum() == 80
    with pytest.raises(ShapeError):
        position_grid(truth[:, :8], truth[:, :8])


def test_grid_consistency_identity(rng):
    pred = rng.integers(0, 2, (37, 9, 9))
    truth = rng.integers(0, 2, (37, 9, 9))
    assert position_grid(pred, truth).mean() == pytest.approx(compute_metrics(pred, truth).oa, abs=1e-12)


def accumulate_oracle(h, w, centers, pred):
    total = [[0.0] * w for _ in range(h)]
    count = [[0] * w for _ in range(h)]
    for (r, c), p in zip(centers, pred):
        for i in range(9):
            for j in range(9):
                total[r - 4 + i][c - 4 + j] += p[i, j]
                count[r - 4 + i][c - 4 + j] += 1
    return total, count


def test_interior_coverage_is_81(rng):
    r = scene(rng, 30, 30)
    rs, cs = valid_region(r, 8)
    centers = np.array([(i, j) for i in range(rs.start, rs.stop) for j in range(cs.start, cs.stop)])
    _, count = accumulate_oracle(30, 30, centers, np.zeros((len(centers), 9, 9)))
    assert all(count[i][j] == 81 for i in range(rs.start + 8, rs.stop - 8) for j in range(cs.start + 8, cs.stop - 8))


def test_accumulation_matches_oracle(rng):
    h, w = 20, 23
    rs, cs = slice(4, 16), slice(4, 19)
    centers = np.array([(i, j) for i in range(rs.start, rs.stop) for j in range(cs.start, cs.stop)])
    pred = rng.uniform(0, 1, (len(centers), 9, 9))
    out = accumulate_windows(h, w, centers, pred, rs, cs)
    total, count = accumulate_oracle(h, w, centers, pred)
    for i in range(rs.start, rs.stop):
        for j in range(cs.start, cs.stop):
            assert abs(out[i, j] - total[i][j] / count[i][j]) <= 1e-12
    assert np.isnan(out[0, 0]) and np.isnan(out[rs.stop, 5])
    perm = rng.permutation(len(centers))
    np.testing.assert_allclose(accumulate_windows(h, w, centers[perm], pred[perm], rs, cs), out, rtol=0, atol=1e-12)


def test_constant_outputs_aggregate_to_constant(rng):
    rs, cs = slice(4, 12), slice(4, 12)
    centers = np.array([(i, j) for i in range(4, 12) for j in range(4, 12)])
    out = accumulate_windows(16, 16, centers, np.ones((len(centers), 9, 9)), rs, cs)
    assert np.all(out[rs, cs] == 1.0)


def test_aggregate_modes_share_region(rng):
    r = scene(rng, 34, 31)
    model = tiny("patch9")
    maps = {m: aggregate_overlaps(r, model, m) for m in ("center", "mean", "tile")}
    mask = ~np.isnan(maps["center"])
    assert mask.sum() == (34 - 16) * (31 - 16)
    for m in maps.values():
        assert np.array_equal(~np.isnan(m), mask)
        assert np.nanmin(m) >= 0 and np.nanmax(m) <= 1
    # center mode equals the patch-to-pixel view of the same outputs
    centers = np.argwhere(mask)
    np.testing.assert_allclose(maps["center"][mask], model.predict_centers(r, centers)[:, 4, 4], atol=1e-12)
    with pytest.raises(ConfigError):
        aggregate_overlaps(r, tiny("pixel"), "mean")


def test_pixel_model_region(rng):
    r = scene(rng, 40, 40)
    out = predict_raster(r, tiny("pixel"), "pixel")
    assert (~np.isnan(out)).sum() == 24 * 24
    with pytest.raises(DataError):
        predict_raster(scene(rng, 16, 40), tiny("pixel"), "pixel")


def test_tile_starts():
    assert tile_starts(0, 18).tolist() == [0, 9]
    assert tile_starts(8, 28).tolist() == [8, 17, 19]
    with pytest.raises(DataError):
        tile_starts(0, 8)


def test_tile_forward_count(rng):
    r = scene(rng, 52, 61)
    pixel, patch = tiny("pixel"), tiny("patch9")
    predict_raster(r, pixel, "pixel")
    aggregate_overlaps(r, patch, "tile")
    hv, wv = 61 - 16, 52 - 16
    assert pixel.forward_samples == hv * wv
    assert patch.forward_samples == math.ceil(hv / 9) * math.ceil(wv / 9)


def test_bench_keys_and_errors():
    model = tiny("pixel")
    stats = bench_inference(model, batch_count=10, batch_size=8)
    assert {"mean_s", "std_s", "batches", "threads", "pixels_per_second"} <= set(stats)
    assert stats["batches"] == 10 and stats["threads"] == 1
    assert model.forward_batches == 13
    assert bench_inference(tiny("patch9"), 10, 8)["pixels_per_sample"] == 81
    with pytest.raises(ConfigError):
        bench_inference(model, batch_count=9)
