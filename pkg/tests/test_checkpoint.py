"""Checkpoint container round-trip tests."""

import numpy as np
import pytest

from evdetect.checkpoint import load_model, read_container, save_model, write_container
from evdetect.data import SeriesStats
from evdetect.model import ModelDims, ModelParams, mtr_forward


def test_model_round_trip_bit_exact(tmp_path):
    dims = ModelDims(C=8, hidden=8, heads=2, lm=4, gm=12, e0=6, e1=3)
    params = ModelParams(dims, seed=3)
    stats = SeriesStats(mean=0.7312819401, std=0.28718374, count=999)
    path = tmp_path / "model.npz"
    save_model(path, params, stats)
    loaded, loaded_stats = load_model(path)
    assert loaded.dims == dims
    assert loaded_stats == stats
    for a, b in zip(params.parameters(), loaded.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    rng = np.random.default_rng(0)
    lm, gm = rng.normal(size=4), rng.normal(size=12)
    np.testing.assert_array_equal(mtr_forward(lm, gm, params), mtr_forward(lm, gm, loaded))


def test_wrong_kind_rejected(tmp_path):
    path = tmp_path / "box.npz"
    write_container(path, "evdetect-model", {"dims": {}, "stats": {}}, {"x": np.ones(3)})
    with pytest.raises(ValueError):
        read_container(path, "evdetect-engine")


def test_missing_array_rejected(tmp_path):
    from evdetect.checkpoint import load_model_arrays, model_arrays

    dims = ModelDims()
    params = ModelParams(dims, seed=0)
    arrays = model_arrays(params)
    arrays.pop("head.w")
    with pytest.raises(ValueError, match="head.w"):
        load_model_arrays(ModelParams(dims, seed=1), arrays)
