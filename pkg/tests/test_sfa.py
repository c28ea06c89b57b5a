import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from oracles import sfa_l1_oracle
from spoofprobe.datasets import SynthConfig, generate_synthetic
from spoofprobe.errors import CheckpointError, ConfigurationError, DimensionError
from spoofprobe.models import build_model, parameters_snapshot, state_hash
from spoofprobe.sfa import (HIDDEN_DIMS, SfaGenerators, SfaTrainConfig, build_generators, combine_maps, compose_maps,
                            decode_signed16, encode_signed16, export_activation_maps, load_generators, save_generators,
                            sfa_apply, sfa_apply_predicted, sfa_loss, sfa_perturbation, train_sfa, training_composite)


def test_generator_architecture(gens):
    convs = [u[0] for u in gens.live.encoder]
    assert [c.out_channels for c in convs] == list(HIDDEN_DIMS)
    assert all(isinstance(u[1], torch.nn.BatchNorm2d) and isinstance(u[2], torch.nn.LeakyReLU)
               for u in gens.live.encoder)


def test_output_bounded_by_alpha(gens):
    x = torch.rand(4, 3, 64, 64)
    with torch.no_grad():
        g_live, g_spoof, kl = gens(x)
    assert g_live.shape == (4, 1, 64, 64)
    assert g_live.abs().max() <= gens.alpha and g_spoof.abs().max() <= gens.alpha
    assert torch.isfinite(kl)


def test_nonpositive_alpha_rejected():
    with pytest.raises(ConfigurationError):
        SfaGenerators(alpha=0)


def test_antisymmetry(gens):
    x = torch.rand(3, 3, 64, 64)
    with torch.no_grad():
        pair = compose_maps(x, gens)
    assert torch.equal(pair.m_spoof, -pair.m_live)
    assert torch.equal(pair.m_live + pair.m_spoof, torch.zeros_like(pair.m_live))


def test_constant_image_mask_is_one(gens):
    x = torch.full((2, 3, 64, 64), 0.3)
    with torch.no_grad():
        g_live, _, _ = gens(x)
        pair = compose_maps(x, gens)
    assert torch.equal(pair.m_live, g_live)


def test_zero_mask_gives_negated_spoof_generator(gens):
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        _, g_spoof, _ = gens(x)
        pair = compose_maps(x, gens, mask=torch.zeros(2, 1, 64, 64))
    assert torch.equal(pair.m_live, -g_spoof)


def test_mask_shape_mismatch():
    with pytest.raises(DimensionError):
        combine_maps(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 4, 4))


def test_label_routing(gens):
    x = torch.rand(2, 3, 64, 64) * 0.5 + 0.25
    y = torch.tensor([0, 1])
    with torch.no_grad():
        pair = compose_maps(x, gens)
        comp = training_composite(x, y, gens)
        infer = sfa_apply(x, y, gens)
    # training: live gets M_spoof, spoof gets M_live
    torch.testing.assert_close(comp[0], (x[0] + pair.m_spoof[0]).clamp(0, 1))
    torch.testing.assert_close(comp[1], (x[1] + pair.m_live[1]).clamp(0, 1))
    # inference: live gets M_live, spoof gets M_spoof
    torch.testing.assert_close(infer[0], (x[0] + pair.m_live[0]).clamp(0, 1))
    torch.testing.assert_close(infer[1], (x[1] + pair.m_spoof[1]).clamp(0, 1))


def test_zero_generators_are_identity():
    g = build_generators(seed=0).zero_output_().eval()
    x = torch.rand(3, 3, 64, 64)
    y = torch.tensor([0, 1, 0])
    with torch.no_grad():
        assert torch.equal(training_composite(x, y, g), x)
        assert torch.equal(sfa_apply(x, y, g), x)


def test_perturbation_bound(gens):
    x = torch.rand(4, 3, 64, 64)
    with torch.no_grad():
        p = sfa_perturbation(x, torch.tensor([0, 1, 1, 0]), gens)
    assert p.abs().max() <= gens.alpha


def test_outputs_stay_in_pixel_range(gens):
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        out = sfa_apply(x, torch.tensor([0, 1]), gens)
    assert out.min() >= 0 and out.max() <= 1


def test_predicted_label_mode(gens, model):
    x = torch.rand(3, 3, 64, 64)
    out, y_hat = sfa_apply_predicted(x, model, gens)
    assert torch.equal(y_hat, model(x).v_c.argmax(dim=1))
    with torch.no_grad():
        assert torch.equal(out, sfa_apply(x, y_hat, gens))


# L_1 -----------------------------------------------------------------------


def test_loss_examples():
    assert float(sfa_loss(torch.full((5,), 0.5), torch.tensor([0, 1, 0, 1, 1]))) == pytest.approx(math.log(2))
    assert float(sfa_loss(torch.tensor([0.9, 0.2]), torch.tensor([0, 1]))) == pytest.approx(
        -0.5 * (math.log(0.9) + math.log(0.8)), abs=1e-6)
    assert -0.5 * (math.log(0.9) + math.log(0.8)) == pytest.approx(0.1643, abs=1e-4)
    assert float(sfa_loss(torch.tensor([1.0 - 1e-9]), torch.tensor([0]))) < 1e-6


def test_loss_guard_at_extremes():
    v = sfa_loss(torch.tensor([0.0, 1.0], dtype=torch.float64), torch.tensor([0, 1]))
    assert torch.isfinite(v) and float(v) == pytest.approx(-math.log(1e-7), rel=1e-3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-6, 1 - 1e-6), st.integers(0, 1)), min_size=1, max_size=20))
def test_loss_matches_oracle(pairs):
    d = [p[0] for p in pairs]
    y = [p[1] for p in pairs]
    got = float(sfa_loss(torch.tensor(d, dtype=torch.float64), torch.tensor(y)))
    assert got == pytest.approx(sfa_l1_oracle(d, y), rel=1e-6, abs=1e-12)


# training ------------------------------------------------------------------


@pytest.fixture(scope="module")
def sfa_data():
    return generate_synthetic(SynthConfig(n_samples=16, seed=9))


def test_frozen_model_untouched(sfa_data):
    target = build_model("small-cnn", seed=0)
    before = parameters_snapshot(target)
    flags = [p.requires_grad for p in target.parameters()]
    gens = build_generators(seed=0)
    g_before = state_hash(gens)
    gens, history = train_sfa(gens, target, sfa_data, SfaTrainConfig(epochs=1, batch_size=8))
    after = parameters_snapshot(target)
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert flags == [p.requires_grad for p in target.parameters()]
    assert state_hash(gens) != g_before
    assert len(history) == 1 and set(history[0]) == {"epoch", "l1", "kl"}


def test_training_reproducible(sfa_data):
    target = build_model("small-cnn", seed=0)
    cfg = SfaTrainConfig(epochs=1, batch_size=8, seed=3)
    _, h1 = train_sfa(build_generators(seed=1), target, sfa_data, cfg)
    _, h2 = train_sfa(build_generators(seed=1), target, sfa_data, cfg)
    assert h1[0]["l1"] == pytest.approx(h2[0]["l1"], rel=1e-5)


def test_zero_epochs_leaves_generators(sfa_data):
    gens = build_generators(seed=0)
    h = state_hash(gens)
    train_sfa(gens, build_model("small-cnn"), sfa_data, SfaTrainConfig(epochs=0))
    assert state_hash(gens) == h


@pytest.mark.parametrize("kwargs", [dict(discriminator="both"), dict(beta_kl=-1.0), dict(epochs=-1)])
def test_invalid_sfa_config(kwargs):
    with pytest.raises(ConfigurationError):
        SfaTrainConfig(**kwargs)


# persistence ---------------------------------------------------------------


def test_save_load_round_trip(tmp_path, gens):
    save_generators(gens, tmp_path / "sfa", model_sha256="abc", beta_kl=1e-4)
    back, meta = load_generators(tmp_path / "sfa")
    assert meta["alpha"] == gens.alpha and meta["frozen_model_sha256"] == "abc" and meta["beta_kl"] == 1e-4
    assert state_hash(back) == state_hash(gens)
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(compose_maps(x, back).m_live, compose_maps(x, gens).m_live)


def test_load_rejects_model_checkpoint(tmp_path, model):
    from spoofprobe.models import save_model

    save_model(model, tmp_path / "m")
    with pytest.raises(CheckpointError):
        load_generators(tmp_path / "m")


def test_signed16_round_trip(rng):
    m = rng.uniform(-0.1, 0.1, (14, 14))
    back = decode_signed16(encode_signed16(m, 0.1), 0.1)
    assert np.abs(back - m).max() <= 0.1 / 32767
    assert encode_signed16(np.zeros(1), 0.1)[0] == 32768


def test_export_maps(tmp_path, gens):
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        pair = compose_maps(x, gens)
    paths = export_activation_maps(pair, ["a", "b"], tmp_path, gens.alpha)
    assert sorted(p.name for p in paths) == ["a.live.png", "a.spoof.png", "b.live.png", "b.spoof.png"]
    live = np.array(Image.open(tmp_path / "a.live.png"))
    spoof = np.array(Image.open(tmp_path / "a.spoof.png"))
    np.testing.assert_allclose(decode_signed16(live, gens.alpha), pair.m_live[0, 0].numpy(), atol=1e-5)
    # antisymmetry survives the encoding up to one code step
    assert np.abs(live.astype(int) - 32768 + spoof.astype(int) - 32768).max() <= 1
    assert json.loads((tmp_path / "scale.json").read_text())["alpha"] == gens.alpha
