import json

import numpy as np
import pytest
from PIL import Image

from oracles import area_downsample_oracle
from spoofprobe.datasets import (LIVE_TYPE, MAP_SIZE, NUM_ATTRS, UNLABELED, Dataset, ImageSample, SynthConfig,
                                 SyntheticProvider, area_downsample, generate_synthetic, load_disk_dataset,
                                 make_geometric_targets, save_disk_dataset)
from spoofprobe.errors import ConfigurationError, ProviderError, SchemaError


def test_generation_is_byte_deterministic():
    a = generate_synthetic(SynthConfig(n_samples=12, seed=5))
    b = generate_synthetic(SynthConfig(n_samples=12, seed=5))
    assert a.fingerprint() == b.fingerprint()
    assert a.pixels.tobytes() == b.pixels.tobytes()
    c = generate_synthetic(SynthConfig(n_samples=12, seed=6))
    assert a.fingerprint() != c.fingerprint()


def test_exact_class_balance():
    ds = generate_synthetic(SynthConfig(n_samples=100, class_balance=0.5, seed=1))
    assert len(ds) == 100
    assert int((ds.y == 0).sum()) == 50 and int((ds.y == 1).sum()) == 50


@pytest.mark.parametrize("kwargs", [dict(n_samples=1), dict(n_samples=10, image_size=8),
                                    dict(n_samples=10, class_balance=1.5), dict(n_samples=10, artifact_strength=0.0)])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigurationError):
        generate_synthetic(SynthConfig(**kwargs))


def test_sample_invariants(small_data):
    assert small_data.pixels.min() >= 0.0 and small_data.pixels.max() <= 1.0
    for s, t in small_data:
        assert (s.y == 0) == (s.spoof_type == LIVE_TYPE)
        assert s.attrs.shape == (NUM_ATTRS,)
        assert t.depth.shape == t.reflection.shape == (1, MAP_SIZE, MAP_SIZE)
        # one side is all-zero by class
        assert np.all(t.depth * t.reflection == 0)
        if s.y == 1:
            assert not t.depth.any()
        else:
            assert not t.reflection.any()
            assert s.illum == 0


def test_dataset_is_read_only(small_data):
    with pytest.raises(ValueError):
        small_data.pixels[0, 0, 0, 0] = 0.5


def test_label_pair_invariant():
    px = np.zeros((3, 16, 16), np.float32)
    with pytest.raises(SchemaError):
        ImageSample(px, y=0, attrs=np.zeros(NUM_ATTRS), spoof_type=3, illum=0, id="bad")
    with pytest.raises(SchemaError):
        ImageSample(px + 2.0, y=0, attrs=np.zeros(NUM_ATTRS), spoof_type=0, illum=0, id="bright")


def test_area_downsample_matches_oracle(rng):
    field = rng.random((64, 64))
    np.testing.assert_allclose(area_downsample(field, 14), area_downsample_oracle(field.tolist(), 14),
                               rtol=1e-12, atol=1e-12)
    # integer ratio reduces to block means
    f = rng.random((28, 28))
    np.testing.assert_allclose(area_downsample(f, 14), f.reshape(14, 2, 14, 2).mean(axis=(1, 3)))


def test_live_depth_is_downsampled_generator_field(small_data):
    i = int(np.flatnonzero(small_data.y == 0)[0])
    s, t = small_data[i]
    expected = np.clip(np.array(area_downsample_oracle(s.depth_field.astype(np.float64).tolist(), MAP_SIZE)), 0, 1)
    np.testing.assert_allclose(t.depth[0], expected, atol=1e-6)


def test_provider_failure_names_sample(small_data):
    class Broken:
        def live_depth(self, sample):
            raise RuntimeError("estimator offline")

        def spoof_reflection(self, sample):
            raise RuntimeError("estimator offline")

    s, _ = small_data[0]
    with pytest.raises(ProviderError) as err:
        make_geometric_targets(s, Broken())
    assert s.id in str(err.value)


def test_proxy_targets_without_fields(small_data):
    s, _ = small_data[0]
    bare = ImageSample(s.pixels, s.y, s.attrs, s.spoof_type, s.illum, s.id)
    t = make_geometric_targets(bare, SyntheticProvider())
    m = t.depth if s.y == 0 else t.reflection
    assert m.shape == (1, MAP_SIZE, MAP_SIZE) and 0 <= m.min() and m.max() <= 1


def test_disk_round_trip(tmp_path, small_data):
    save_disk_dataset(small_data, tmp_path, "train")
    back = load_disk_dataset(tmp_path, "train", image_size=64)
    assert back.ids == small_data.ids
    np.testing.assert_array_equal(back.y, small_data.y)
    np.testing.assert_array_equal(back.attrs, small_data.attrs)
    np.testing.assert_array_equal(back.spoof_type, small_data.spoof_type)
    np.testing.assert_array_equal(back.illum, small_data.illum)
    assert np.abs(back.pixels - small_data.pixels).max() <= 1 / 255 + 1e-6
    # targets rebuilt from the 8-bit fields stay close
    assert np.abs(back.depth - small_data.depth).max() <= 1 / 255 + 1e-5


def _write_fixture(root, rows, size=20):
    base = root / "test"
    (base / "images").mkdir(parents=True)
    for r in rows:
        Image.fromarray(np.full((size, size, 3), 128, np.uint8)).save(base / "images" / r["file"])
    (base / "labels.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))


def test_ten_image_fixture(tmp_path):
    rows = []
    for k in range(10):
        y = k % 2
        rows.append({"file": f"img{k}.png", "y": y, "attrs": [k % 2] * NUM_ATTRS,
                     "spoof_type": 0 if y == 0 else 1 + k % 10, "illum": 0 if y == 0 else 1 + k % 4})
    rows[3].pop("attrs")
    _write_fixture(tmp_path, rows)
    ds = load_disk_dataset(tmp_path, "test", image_size=32)
    assert len(ds) == 10
    assert ds.ids == tuple(f"img{k}" for k in range(10))
    assert list(ds.y) == [k % 2 for k in range(10)]
    assert list(ds.spoof_type) == [r["spoof_type"] for r in rows]
    assert (ds.attrs[3] == UNLABELED).all()
    assert ds.pixels.shape == (10, 3, 32, 32)
    np.testing.assert_allclose(ds.pixels, 128 / 255, atol=1e-6)


def test_empty_index_gives_empty_dataset(tmp_path):
    (tmp_path / "train").mkdir()
    (tmp_path / "train" / "labels.jsonl").write_text("")
    ds = load_disk_dataset(tmp_path, "train")
    assert isinstance(ds, Dataset) and len(ds) == 0


def test_missing_index_is_io_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_disk_dataset(tmp_path, "train")


@pytest.mark.parametrize("row", [
    {"file": "a.png", "y": 0, "spoof_type": 4},
    {"file": "a.png", "y": 1, "spoof_type": 11},
    {"file": "a.png", "y": 1, "spoof_type": 2, "illum": 9},
    {"file": "a.png", "y": 1, "attrs": [0, 1]},
    {"y": 1},
])
def test_schema_errors(tmp_path, row):
    _write_fixture(tmp_path, [dict(row, file="a.png")] if "file" in row else [{"file": "a.png", "y": 0}])
    if "file" not in row:
        (tmp_path / "test" / "labels.jsonl").write_text(json.dumps(row) + "\n")
    with pytest.raises(SchemaError):
        load_disk_dataset(tmp_path, "test")


def test_parallel_loading_keeps_order(tmp_path, small_data):
    save_disk_dataset(small_data, tmp_path, "test")
    a = load_disk_dataset(tmp_path, "test", workers=1)
    b = load_disk_dataset(tmp_path, "test", workers=4)
    assert a.fingerprint() == b.fingerprint()


def test_batch_and_subset(small_data):
    sub = small_data.subset([2, 5])
    assert sub.ids == (small_data.ids[2], small_data.ids[5])
    b = small_data.batch([2, 5])
    assert tuple(b.pixels.shape) == (2, 3, 64, 64)
    assert b.y.tolist() == [int(small_data.y[2]), int(small_data.y[5])]
