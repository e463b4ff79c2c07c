import math

import numpy as np
import pytest

import cellflow


def disc_labels(shape, discs):
    rows, cols = np.mgrid[0 : shape[0], 0 : shape[1]]
    labels = np.zeros(shape, dtype=np.uint32)
    for i, (r, c, rad) in enumerate(discs, start=1):
        inside = (rows - r) ** 2 + (cols - c) ** 2 <= rad**2
        labels[inside & (labels == 0)] = i
    return labels


def test_tensor_round_trip(tmp_path):
    for arr in (
        np.zeros((2, 3), dtype=np.float32),
        np.arange(24, dtype=np.uint32).reshape(2, 3, 4),
        np.array([1, 2, 255], dtype=np.uint8),
    ):
        path = tmp_path / "t.cvtt"
        cellflow.write_tensor(path, arr)
        back = cellflow.read_tensor(path)
        assert back.dtype == arr.dtype
        np.testing.assert_array_equal(back, arr)
    big = np.zeros((1024, 1024), dtype=np.float32)
    cellflow.write_tensor(tmp_path / "big.cvtt", big)
    assert (tmp_path / "big.cvtt").stat().st_size == 4 * 1024 * 1024 + cellflow.tensor_header_size(2)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.cvtt"
    path.write_bytes(b"XXXX\x01\x01\x01\x01\x00\x00\x00\x00\x00\x00\x00")
    with pytest.raises(cellflow.CellflowError, match="BadMagic"):
        cellflow.read_tensor(path)


def test_postprocess_recovers_encoded_discs():
    gt = disc_labels((96, 96), [(20, 20, 9), (60, 30, 12), (40, 70, 10)])
    np_map, h, v = cellflow.encode_targets(gt)
    pred = cellflow.postprocess(np_map, h, v)
    assert pred.dtype == np.uint32
    assert cellflow.pq(pred, gt)["pq"] >= 0.95


def test_metrics():
    assert cellflow.detection_score(8, 2, 4)[2] == pytest.approx(8 / 11)
    m = cellflow.match_detections(np.array([[0.0, 0.0]]), np.array([[10.0, 10.0]]))
    assert len(m[0]["tp"]) == 1
    m = cellflow.match_detections(np.array([[0.0, 0.0]]), np.array([[11.0, 11.0]]))
    assert m[0]["fp"] == [0] and m[0]["fn"] == [0]
    assert abs(cellflow.co2_kg(3170) - 1.37) <= 0.01


def test_tiles_and_resampling():
    plan = cellflow.plan_tiles(4096, 4096, 1024, 64)
    origins = sorted({t["origin"][0] for t in plan["tiles"]})
    assert origins == [0, 960, 1920, 2880, 3072]
    img = np.full((40, 30), 0.25, dtype=np.float32)
    out = cellflow.lanczos_resample(img, 0.5)
    assert out.shape == (20, 15)
    np.testing.assert_allclose(out, 0.25, atol=1e-6)
    labels, dropped = cellflow.resample_labels(disc_labels((64, 64), [(30, 30, 10)]), 2.0)
    assert labels.shape == (128, 128) and dropped == 0


def test_tokens_and_embeddings():
    patch, size, k_extra, dim = 16, 64, 1, 4
    n = (size // patch) ** 2
    flat = np.arange((n + k_extra) * dim, dtype=np.float32).reshape(n + k_extra, dim)
    grid = cellflow.reshape_tokens(flat, patch, size, size, k_extra)
    assert grid.shape == (4, 4, dim)
    np.testing.assert_array_equal(grid[1, 2], flat[k_extra + 1 * 4 + 2])
    labels = np.zeros((size, size), dtype=np.uint32)
    labels[0:8, 0:8] = 1  # one token
    labels[10:20, 10:20] = 2  # four tokens
    ids, emb = cellflow.extract_embeddings(labels, grid, patch)
    assert ids == [1, 2]
    np.testing.assert_allclose(emb[0], grid[0, 0])
    np.testing.assert_allclose(emb[1], grid[0:2, 0:2].reshape(-1, dim).mean(axis=0), rtol=1e-6)


def test_if_fraction_threshold():
    cell = np.zeros((10, 20), dtype=np.uint8)
    cell[0:10, 0:2] = 1  # 20 px
    mask = np.zeros_like(cell)
    mask[0:3, 0] = 1
    assert cellflow.if_overlap_fraction(cell, mask) == pytest.approx(0.15)


def test_train_and_predict(tmp_path):
    rng = np.random.default_rng(0)
    centers = np.eye(4, 16, dtype=np.float32) * 6
    y = rng.integers(0, 4, 1000).astype(np.int32)
    x = (centers[y] + rng.standard_normal((1000, 16))).astype(np.float32)
    result = cellflow.train(x[:800], y[:800], x[800:], y[800:], ["a", "b", "c", "d"], {"max_epochs": 20, "seed": 1})
    assert result["val_macro_f1"] >= 0.95
    model = result["model"]
    probs = model.predict_proba(x[800:])
    assert probs.shape == (200, 4)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    assert cellflow.macro_f1(probs.argmax(axis=1).astype(np.int32), y[800:], 4) >= 0.95
    assert cellflow.auroc(probs.astype(np.float64), y[800:]) > 0.95
    model.save(tmp_path / "model.json")
    again = cellflow.Classifier.load(tmp_path / "model.json")
    np.testing.assert_array_equal(again.predict_proba(x[800:]), probs)


def test_invalid_config_is_rejected():
    x = np.zeros((4, 2), dtype=np.float32)
    y = np.array([0, 1, 0, 1], dtype=np.int32)
    with pytest.raises(cellflow.CellflowError):
        cellflow.train(x, y, x, y, ["a", "b"], {"hidden": -3})
    assert math.isclose(cellflow.co2_kg(0), 0.0)
