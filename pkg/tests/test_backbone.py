import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from meshletemp.backbone import Backbone, extract_features


def _backbone(channels=8, widths=(4, 4, 8)):
    torch.manual_seed(0)
    return Backbone(channels, list(widths)).double()


def test_zero_image_gives_finite_grid():
    bb = _backbone(128, (16, 32, 64))
    with torch.no_grad():
        nn_last = bb.stages[-1]
        nn_last.bias.zero_()
        out = extract_features(torch.zeros(112, 112, 1, dtype=torch.float64), bb)
    assert out.shape == (128, 7, 7)
    assert torch.isfinite(out).all()


def test_full_scale_channel_count():
    bb = Backbone(2048, [16, 32, 64])
    with torch.no_grad():
        out = bb(torch.zeros(1, 1, 112, 112))
    assert out.shape == (1, 2048, 7, 7)


@settings(max_examples=10, deadline=None)
@given(side=st.sampled_from([16, 32, 64, 112, 128]), channels=st.integers(1, 12))
def test_grid_is_always_seven_by_seven(side, channels):
    bb = Backbone(channels, [4, 4, 4])
    with torch.no_grad():
        assert bb(torch.rand(2, 1, side, side)).shape == (2, channels, 7, 7)


@pytest.mark.parametrize("side", [100, 113, 8])
def test_rejects_non_conforming_resolution(side):
    with pytest.raises(ValueError, match="divisible"):
        _backbone()(torch.zeros(1, 1, side, side, dtype=torch.float64))


def test_deterministic_bitwise(rng):
    bb = _backbone()
    img = torch.from_numpy(rng.uniform(size=(64, 64, 1)))
    with torch.no_grad():
        a = extract_features(img, bb)
        b = extract_features(img, bb)
    assert torch.equal(a, b)


def test_batched_extract_matches_single(rng):
    bb = _backbone()
    imgs = torch.from_numpy(rng.uniform(size=(3, 32, 32, 1)))
    with torch.no_grad():
        batch = extract_features(imgs, bb)
        for i in range(3):
            torch.testing.assert_close(batch[i], extract_features(imgs[i], bb), rtol=0, atol=1e-13)


def test_input_gradient_matches_finite_differences(rng):
    bb = _backbone()
    img0 = rng.uniform(size=(32, 32, 1))
    probe = torch.from_numpy(rng.normal(size=(8, 7, 7)))

    def readout(x):
        return (extract_features(torch.from_numpy(x), bb) * probe).sum()

    x = torch.from_numpy(img0.copy()).requires_grad_(True)
    (extract_features(x, bb) * probe).sum().backward()
    grad = x.grad.numpy()
    h = 1e-5
    with torch.no_grad():
        for flat in rng.choice(img0.size, size=20, replace=False):
            idx = np.unravel_index(flat, img0.shape)
            up, dn = img0.copy(), img0.copy()
            up[idx] += h
            dn[idx] -= h
            fd = float(readout(up) - readout(dn)) / (2 * h)
            if max(abs(fd), abs(grad[idx])) > 1e-8:
                assert abs(fd - grad[idx]) <= 1e-3 * max(abs(fd), abs(grad[idx]))
