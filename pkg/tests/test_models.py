import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import softmax_argmax_oracle
from spoofprobe.datasets import SynthConfig, generate_synthetic
from spoofprobe.errors import CheckpointError, ConfigurationError, DimensionError
from spoofprobe.losses import LossWeights, total_loss
from spoofprobe.models import (BACKBONES, MultitaskModel, TrainConfig, build_model, forward, load_model,
                               parameters_snapshot, predict_binary, register_backbone, save_model, state_hash,
                               train)

GOLDEN = Path(__file__).parent / "golden" / "tiny_cnn_seed0.npz"
HEAD_SHAPES = {"v_f": (40,), "v_t": (11,), "v_i": (5,), "v_d": (1, 14, 14), "v_r": (1, 14, 14), "v_c": (2,)}


@pytest.mark.parametrize("name", ["small-cnn", "vgg-style", "resnet-style", "densenet-style", "tiny-cnn"])
def test_head_shapes(name):
    m = build_model(name, seed=0).eval()
    out = forward(m, torch.rand(3, 3, 64, 64))
    for k, shape in HEAD_SHAPES.items():
        t = getattr(out, k)
        assert tuple(t.shape) == (3,) + shape
        assert torch.isfinite(t).all()
    spec = m.backbone_spec
    assert spec.feature_dim == spec.spatial_feature_dims[0] > 0


def test_single_image_drops_batch_dim(model):
    out = forward(model, torch.rand(3, 64, 64))
    assert tuple(out.v_d.shape) == (1, 14, 14) and tuple(out.v_c.shape) == (2,)


def test_identical_inputs_identical_outputs(model):
    x = torch.rand(2, 3, 64, 64)
    a, b = forward(model, x), forward(model, x.clone())
    for k in HEAD_SHAPES:
        assert torch.equal(getattr(a, k), getattr(b, k))


def test_batch_equals_single_calls(model):
    x = torch.rand(4, 3, 64, 64)
    batch = forward(model, x)
    for i in range(4):
        single = forward(model, x[i])
        for k in HEAD_SHAPES:
            torch.testing.assert_close(getattr(batch, k)[i], getattr(single, k), atol=1e-5, rtol=1e-5)


def test_golden_forward():
    g = np.load(GOLDEN)
    m = build_model("tiny-cnn", seed=0, image_size=16).double()
    out = forward(m, g["x"])
    for k in HEAD_SHAPES:
        np.testing.assert_allclose(getattr(out, k).numpy(), g[k], atol=1e-5, rtol=0)


def test_shape_mismatch_is_dimension_error(model):
    with pytest.raises(DimensionError):
        forward(model, torch.rand(1, 3, 32, 32))
    with pytest.raises(DimensionError):
        forward(model, torch.rand(1, 1, 64, 64))


def test_unknown_backbone():
    with pytest.raises(ConfigurationError):
        MultitaskModel("swin")


def test_register_backbone_rejects_duplicates():
    with pytest.raises(ConfigurationError):
        register_backbone("small-cnn", BACKBONES["small-cnn"])


# predict_binary ------------------------------------------------------------


def test_predict_binary_examples():
    cls, conf = predict_binary(torch.tensor([2.0, 0.0]))
    assert cls == 0 and conf == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-6)
    assert predict_binary(torch.tensor([0.0, 0.0]))[0] == 0


def test_predict_binary_matches_oracle(rng):
    logits = rng.normal(0, 3, (1000, 2))
    logits[:10, 1] = logits[:10, 0]
    cls, conf = predict_binary(torch.tensor(logits))
    for k in range(1000):
        want_cls, want_conf = softmax_argmax_oracle(*logits[k])
        assert int(cls[k]) == want_cls
        assert float(conf[k]) == pytest.approx(want_conf, abs=1e-9)


def test_predict_binary_with_model(model):
    x = torch.rand(3, 3, 64, 64)
    cls, conf = predict_binary(model, x)
    assert cls.shape == (3,) and ((conf >= 0.5) & (conf <= 1)).all()


# training ------------------------------------------------------------------


@pytest.fixture(scope="module")
def train_data():
    return generate_synthetic(SynthConfig(n_samples=64, seed=11))


def test_zero_epochs_is_noop(train_data):
    m = build_model("small-cnn", seed=1)
    before = parameters_snapshot(m)
    out, history = train(m, train_data, TrainConfig(epochs=0))
    assert history == []
    after = parameters_snapshot(out)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_is_reproducible(train_data):
    cfg = TrainConfig(epochs=2, batch_size=16, seed=4)
    _, h1 = train(build_model("small-cnn", seed=2), train_data, cfg)
    _, h2 = train(build_model("small-cnn", seed=2), train_data, cfg)
    assert len(h1) == 2 and set(h1[0]) == {"epoch", "loss", "accuracy"}
    for a, b in zip(h1, h2):
        assert a["loss"] == pytest.approx(b["loss"], rel=1e-5)


def test_loss_decreases_on_average(train_data):
    drops = []
    for seed in range(3):
        _, h = train(build_model("small-cnn", seed=seed), train_data, TrainConfig(epochs=3, batch_size=16, seed=seed))
        drops.append(h[-1]["loss"] - h[0]["loss"])
    assert np.mean(drops) <= 0


def test_empty_dataset_rejected(train_data):
    with pytest.raises(ConfigurationError):
        train(build_model("tiny-cnn"), train_data.subset([]), TrainConfig(epochs=1))


def test_invalid_train_config():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=-1)


# checkpoints ---------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, model):
    save_model(model, tmp_path / "ck", seed=3, weights=LossWeights(d=0.2))
    back, meta = load_model(tmp_path / "ck")
    assert state_hash(back) == state_hash(model) == meta["state_sha256"]
    assert meta["backbone"] == "small-cnn" and meta["seed"] == 3 and meta["weights"]["d"] == 0.2
    x = torch.rand(2, 3, 64, 64)
    assert torch.equal(forward(back, x).v_c, forward(model, x).v_c)


def test_checkpoint_schema_mismatch(tmp_path, model):
    save_model(model, tmp_path / "ck")
    meta_path = tmp_path / "ck" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["schema_version"] = 99
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "ck")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_model(tmp_path)


# gradients -----------------------------------------------------------------


def test_input_gradient_matches_finite_differences(tiny_data):
    m = build_model("tiny-cnn", seed=0, image_size=16).double().eval()
    b = tiny_data.batch([0, 1])
    x = b.pixels.double().clone().requires_grad_(True)

    def loss_at(z):
        return total_loss(m(z), b, b)

    loss_at(x).backward()
    g = x.grad.detach().flatten()
    h = 1e-3
    flat = x.detach().flatten()
    good, total = 0, 0
    with torch.no_grad():
        for k in range(0, flat.numel(), 7):
            plus, minus = flat.clone(), flat.clone()
            plus[k] += h
            minus[k] -= h
            fd = (loss_at(plus.view_as(x)) - loss_at(minus.view_as(x))) / (2 * h)
            rel = abs(float(fd) - float(g[k])) / max(abs(float(fd)), abs(float(g[k])), 1e-8)
            good += rel <= 1e-2 or abs(float(fd) - float(g[k])) < 1e-9
            total += 1
    assert good / total >= 0.99
