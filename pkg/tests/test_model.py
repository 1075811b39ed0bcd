import json
import struct

import numpy as np
import pytest
import torch

from killchain.data import LabeledDataset, make_synthetic_pd_dataset, make_toy2d_dataset
from killchain.metrics import mean_iou
from killchain.model import (
    MAGIC,
    ArchitectureSpec,
    ModelFormatError,
    TrainConfig,
    fit,
    init_model,
    input_gradient,
    load_model,
    loss_value,
    predict,
    save_model,
    soften,
    train,
)


def finite_difference(m, x, target, h=1e-5, coords=None):
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    for idx in coords if coords is not None else np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (loss_value(m, xp, target) - loss_value(m, xm, target)) / (2 * h)
    return grad


def test_predict_shapes_and_simplex(tiny_classifier, tiny_localizer, rng):
    x = rng.random((5, 8, 8, 3), dtype=np.float32)
    p = predict(tiny_classifier, x)
    assert p.shape == (5, 4)
    assert np.all(p >= 0) and np.allclose(p.sum(1), 1, atol=1e-5)
    b = predict(tiny_localizer, x)
    assert b.shape == (5, 4)
    assert np.all(b[:, 0] < b[:, 2]) and np.all(b[:, 1] < b[:, 3])
    assert b.min() >= 0 and b.max() <= 1
    assert predict(tiny_classifier, x[0]).shape == (1, 4)


def test_predict_rejects_bad_input(tiny_classifier):
    with pytest.raises(ValueError):
        predict(tiny_classifier, np.zeros((2, 9, 9, 3)))
    with pytest.raises(ValueError):
        predict(tiny_classifier, np.full((2, 8, 8, 3), 2.0))


@pytest.mark.parametrize("which", ["tiny_classifier", "tiny_localizer"])
def test_gradient_matches_finite_differences(which, request, rng):
    m = request.getfixturevalue(which)
    x = rng.uniform(0.1, 0.9, (8, 8, 3))
    target = 2 if m.kind == "classifier" else np.array([0.2, 0.1, 0.6, 0.9])
    g = input_gradient(m, x, target, dtype=torch.float64)
    fd = finite_difference(m, x, target)
    big = np.abs(g) > 1e-6
    rel = np.abs(g[big] - fd[big]) / np.maximum(np.abs(fd[big]), 1e-12)
    assert rel.max() < 1e-3


def test_batch_gradient_is_per_example(tiny_classifier, rng):
    x = rng.random((3, 8, 8, 3), dtype=np.float32)
    t = np.array([0, 1, 3])
    g = input_gradient(tiny_classifier, x, t)
    for i in range(3):
        assert np.allclose(g[i], input_gradient(tiny_classifier, x[i], t[i]), atol=1e-6)
    assert np.allclose(input_gradient(tiny_classifier, x, t, loss_scale=3.0), 3 * g, rtol=1e-5, atol=1e-8)


def test_gradient_rejects_bad_targets(tiny_classifier, tiny_localizer, rng):
    x = rng.random((2, 8, 8, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        input_gradient(tiny_classifier, x, np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        input_gradient(tiny_classifier, x, np.array([0]))
    with pytest.raises(ValueError):
        input_gradient(tiny_localizer, x, np.array([0, 1]))


def test_training_reduces_loss_and_is_seeded():
    data = make_toy2d_dataset(300, seed=0)
    spec = ArchitectureSpec.classifier((1, 1, 2), 3, filters=[], dense=[16])
    cfg = TrainConfig(epochs=15, batch_size=32, learning_rate=0.01, optimizer="adam", seed=2)
    a = train(spec, data, cfg)
    assert len(a.history) == cfg.epochs
    assert a.history[-1]["loss"] < a.initial_loss
    assert a.history[-1]["metric"] > 0.8
    b = train(spec, data, cfg)
    assert a.fingerprint() == b.fingerprint()
    c = train(spec, data, TrainConfig(**{**cfg.__dict__, "seed": 3}))
    assert a.fingerprint() != c.fingerprint()


def test_train_checks_data_against_spec():
    data = make_toy2d_dataset(20, seed=0)
    with pytest.raises(ValueError):
        train(ArchitectureSpec.classifier((1, 1, 2), 5, filters=[], dense=[4]), data, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(ArchitectureSpec.localizer((1, 1, 2), filters=[], dense=[4]), data, TrainConfig(epochs=1))


def test_localizer_learns_boxes():
    data = make_synthetic_pd_dataset(600, (16, 16), seed=0)
    spec = ArchitectureSpec.localizer((16, 16, 3), filters=[8, 8], dense=[32], activation="relu")
    m = train(spec, data, TrainConfig(epochs=15, batch_size=32, learning_rate=0.003, optimizer="adam", seed=0))
    untrained = init_model(spec, seed=0)
    assert mean_iou(predict(m, data.images), data.labels) > mean_iou(predict(untrained, data.images), data.labels) + 0.1


def test_soft_targets_and_temperature():
    p = np.array([[0.7, 0.2, 0.1]])
    assert np.allclose(soften(p, 1.0), p)
    hot = soften(p, 4.0)
    assert np.allclose(hot.sum(), 1) and hot[0, 0] < 0.7 and hot[0, 2] > 0.1
    data = make_toy2d_dataset(100, seed=0)
    spec = ArchitectureSpec.classifier((1, 1, 2), 3, filters=[], dense=[8])
    soft = np.eye(3, dtype=np.float32)[data.labels] * 0.9 + 0.1 / 3
    m = fit(spec, data.images, soft, TrainConfig(epochs=2, seed=0))
    assert m.history and np.isfinite(m.history[-1]["loss"])


def test_train_config_validation():
    for bad in [dict(epochs=0), dict(batch_size=0), dict(learning_rate=0), dict(optimizer="rmsprop"),
                dict(temperature=0)]:
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_spec_validation():
    with pytest.raises(ValueError):
        ArchitectureSpec.classifier((8, 8, 3), 1)
    with pytest.raises(ValueError):
        ArchitectureSpec.classifier((8, 8, 3), 3, activation="gelu")
    spec = ArchitectureSpec.classifier((8, 8, 3), 3, filters=[4], dense=[8])
    assert ArchitectureSpec.from_dict(spec.to_dict()) == spec


def test_save_load_round_trip(tiny_classifier, tmp_path, rng):
    path = save_model(tiny_classifier, tmp_path / "m.kcm")
    back = load_model(path)
    assert back.fingerprint() == tiny_classifier.fingerprint()
    x = rng.random((4, 8, 8, 3), dtype=np.float32)
    assert np.array_equal(predict(back, x), predict(tiny_classifier, x))
    assert path.read_bytes()[:8] == MAGIC


def _rewrite_header(path, mutate):
    raw = path.read_bytes()
    (size,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + size])
    mutate(header)
    blob = json.dumps(header).encode()
    path.write_bytes(raw[:8] + struct.pack("<Q", len(blob)) + blob + raw[16 + size:])


@pytest.mark.parametrize("mutate,field", [
    (lambda h: h.update(format_version=99), "format_version"),
    (lambda h: h.update(param_count=h["param_count"] + 1), "param_count"),
    (lambda h: h.pop("spec"), "spec"),
    (lambda h: h["spec"].update(activation="bogus"), "spec"),
    (lambda h: h["layout"].reverse(), "layout"),
])
def test_corrupted_header_names_field(tiny_classifier, tmp_path, mutate, field):
    path = save_model(tiny_classifier, tmp_path / "m.kcm")
    _rewrite_header(path, mutate)
    with pytest.raises(ModelFormatError, match=field):
        load_model(path)


def test_corrupted_file_errors(tiny_classifier, tmp_path):
    path = save_model(tiny_classifier, tmp_path / "m.kcm")
    raw = path.read_bytes()
    (tmp_path / "bad_magic.kcm").write_bytes(b"NOTAMODEL" + raw[9:])
    with pytest.raises(ModelFormatError, match="magic"):
        load_model(tmp_path / "bad_magic.kcm")
    (tmp_path / "trunc.kcm").write_bytes(raw[:-4])
    with pytest.raises(ModelFormatError, match="param_count"):
        load_model(tmp_path / "trunc.kcm")
    (tmp_path / "junk.kcm").write_bytes(raw[:16] + b"\xff" * 20)
    with pytest.raises(ModelFormatError, match="header"):
        load_model(tmp_path / "junk.kcm")


def test_params_are_immutable(tiny_classifier):
    with pytest.raises(ValueError):
        tiny_classifier.params[0] = 1.0
    assert tiny_classifier.layer_slice("head.0.weight").stop > 0


def test_zero_final_layer_gives_zero_gradient(tiny_classifier, rng):
    params = tiny_classifier.params.copy()
    params[tiny_classifier.layer_slice("head.2.weight")] = 0.0
    params[tiny_classifier.layer_slice("head.2.bias")] = 0.0
    flat = tiny_classifier.with_params(params)
    x = rng.random((5, 8, 8, 3), dtype=np.float32)
    np.testing.assert_allclose(predict(flat, x), 0.25)
    grad = input_gradient(flat, x, rng.integers(0, 4, 5))
    assert not grad.any()
