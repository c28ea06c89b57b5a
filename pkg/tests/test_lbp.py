import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import lbp_oracle
from spoofprobe.errors import DimensionError
from spoofprobe.lbp import LUMA, lbp_map, to_gray


def test_constant_image_is_all_ones():
    m = lbp_map(np.full((3, 9, 9), 0.4, np.float32))
    assert m.shape == (1, 9, 9)
    assert np.all(m == 1.0)


def test_bright_centre_codes_zero():
    img = np.zeros((1, 3, 3), np.float32)
    img[0, 1, 1] = 1.0
    assert lbp_map(img)[0, 1, 1] == 0.0


def test_matches_bruteforce_oracle(rng):
    img = rng.random((1, 8, 8)).astype(np.float32)
    expected = np.array(lbp_oracle(img[0].tolist()))
    np.testing.assert_array_equal(lbp_map(img)[0], expected.astype(np.float32))


def test_rgb_uses_luma(rng):
    img = rng.random((3, 10, 10)).astype(np.float32)
    gray = (LUMA[0] * img[0] + LUMA[1] * img[1] + LUMA[2] * img[2]).astype(np.float32)
    np.testing.assert_array_equal(lbp_map(img), lbp_map(gray[None]))
    assert torch.allclose(to_gray(torch.from_numpy(img)[None])[0, 0], torch.from_numpy(gray), atol=1e-6)


def test_batch_equals_singles(rng):
    x = torch.from_numpy(rng.random((4, 3, 12, 12)).astype(np.float32))
    batched = lbp_map(x)
    assert batched.shape == (4, 1, 12, 12)
    for i in range(4):
        assert torch.equal(batched[i], lbp_map(x[i]))


@pytest.mark.parametrize("shape", [(3, 2, 5), (1, 5, 2), (3, 1, 1)])
def test_too_small(shape):
    with pytest.raises(DimensionError):
        lbp_map(np.zeros(shape, np.float32))


grid_images = arrays(np.int64, (1, 6, 7), elements=st.integers(0, 255))


@settings(max_examples=60, deadline=None)
@given(grid_images)
def test_range(img):
    m = lbp_map((img / 255.0).astype(np.float32))
    assert m.min() >= 0.0 and m.max() <= 1.0


@settings(max_examples=60, deadline=None)
@given(grid_images)
def test_monotone_invariance(img):
    x = img / 255.0
    # strictly increasing on [0, 1]; grid spacing keeps distinct values distinct in float32
    y = x ** 2 + x
    np.testing.assert_array_equal(lbp_map(x.astype(np.float32)), lbp_map((y / 2).astype(np.float32)))
