import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from vxf import functional as F
from vxf.nn import InstanceNorm
from vxf.tensor import Tensor, precision
from vxf.unet import UNet, UNetConfig, flat_index, flatten_spatial, unflat_index


def conv_oracle(x, kernel, stride=1, pad=None):
    """Cross-correlation channel by channel with scipy, zero padded."""
    c_out, c_in, k = kernel.shape[:3]
    pad = (k - 1) // 2 if pad is None else pad
    xp = np.pad(x, ((pad, pad),) * 3 + ((0, 0),))
    full = np.zeros(xp.shape[:3] + (c_out,))
    for o in range(c_out):
        for i in range(c_in):
            full[..., o] += ndimage.correlate(xp[..., i], kernel[o, i], mode="constant", origin=0)
    h = k // 2
    valid = full[h:xp.shape[0] - h, h:xp.shape[1] - h, h:xp.shape[2] - h]
    return valid[::stride, ::stride, ::stride]


@pytest.mark.parametrize("k,stride,c_in", [(3, 1, 1), (3, 1, 4), (3, 2, 2), (3, 2, 5), (1, 1, 3), (5, 1, 2)])
def test_conv3d_matches_scipy(k, stride, c_in):
    rng = np.random.default_rng(k * 10 + stride + c_in)
    x = rng.normal(size=(6, 8, 5, c_in))
    kernel = rng.normal(size=(3, c_in, k, k, k))
    with precision(np.float64):
        got = F.conv3d(Tensor(x), Tensor(kernel), stride=stride).data
    np.testing.assert_allclose(got, conv_oracle(x, kernel, stride), atol=1e-10)


def test_conv3d_without_padding_shrinks():
    rng = np.random.default_rng(1)
    x, kernel = rng.normal(size=(5, 5, 5, 2)), rng.normal(size=(1, 2, 3, 3, 3))
    with precision(np.float64):
        got = F.conv3d(Tensor(x), Tensor(kernel), padding=0).data
    assert got.shape == (3, 3, 3, 1)
    np.testing.assert_allclose(got, conv_oracle(x, kernel, pad=0), atol=1e-10)


def test_conv3d_bias_and_errors():
    x = Tensor(np.zeros((4, 4, 4, 2)))
    out = F.conv3d(x, Tensor(np.zeros((3, 2, 3, 3, 3))), bias=Tensor(np.array([1.0, 2.0, 3.0])))
    np.testing.assert_array_equal(out.data[1, 2, 3], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError, match="channel mismatch"):
        F.conv3d(x, Tensor(np.zeros((1, 3, 3, 3, 3))))
    with pytest.raises(ValueError, match="odd"):
        F.conv3d(x, Tensor(np.zeros((1, 2, 2, 2, 2))))


def trilinear_oracle(x):
    """Voxel-by-voxel half-pixel linear interpolation with clamped borders."""
    d, h, w, c = x.shape
    out = np.zeros((2 * d, 2 * h, 2 * w, c))

    def coord(o, n):
        s = min(max((o + 0.5) / 2 - 0.5, 0.0), n - 1)
        i0 = int(np.floor(s))
        return i0, min(i0 + 1, n - 1), s - i0

    for z in range(2 * d):
        z0, z1, fz = coord(z, d)
        for y in range(2 * h):
            y0, y1, fy = coord(y, h)
            for xx in range(2 * w):
                x0, x1, fx = coord(xx, w)
                acc = 0.0
                for zi, wz in ((z0, 1 - fz), (z1, fz)):
                    for yi, wy in ((y0, 1 - fy), (y1, fy)):
                        for xi, wx in ((x0, 1 - fx), (x1, fx)):
                            acc = acc + wz * wy * wx * x[zi, yi, xi]
                out[z, y, xx] = acc
    return out


def test_trilinear_matches_voxel_oracle():
    x = np.random.default_rng(2).normal(size=(3, 2, 4, 2))
    with precision(np.float64):
        got = F.upsample3d(Tensor(x), 2, "trilinear").data
    np.testing.assert_allclose(got, trilinear_oracle(x), atol=1e-12)


def test_trilinear_agrees_with_scipy_grid_zoom():
    x = np.random.default_rng(3).normal(size=(4, 3, 5))
    with precision(np.float64):
        got = F.upsample3d(Tensor(x[..., None]), 2, "trilinear").data[..., 0]
    ref = ndimage.zoom(x, 2, order=1, grid_mode=True, mode="nearest")
    np.testing.assert_allclose(got, ref, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.floats(-100, 100, allow_nan=False), st.sampled_from(["trilinear", "nearest"]))
def test_upsample_keeps_constant_field(value, mode):
    x = np.full((2, 3, 2, 2), value)
    with precision(np.float64):
        out = F.upsample3d(Tensor(x), 2, mode).data
    assert out.shape == (4, 6, 4, 2)
    np.testing.assert_allclose(out, value, atol=1e-9 * max(1.0, abs(value)))


def test_nearest_upsample_replicates_blocks():
    x = np.arange(8.0).reshape(2, 2, 2, 1)
    out = F.upsample3d(Tensor(x), 2, "nearest").data
    assert out[2:4, 0:2, 2:4, 0].tolist() == np.full((2, 2, 2), x[1, 0, 1, 0]).tolist()


def test_upsample_rejects_unknown_mode():
    with pytest.raises(ValueError):
        F.upsample3d(Tensor(np.zeros((2, 2, 2, 1))), 2, "cubic")


def test_instance_norm_standardizes_each_channel():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 4, 4, 3)) * [1.0, 5.0, 0.1] + [0.0, 10.0, -3.0]
    with precision(np.float64):
        out = InstanceNorm(3)(Tensor(x)).data
    np.testing.assert_allclose(out.reshape(-1, 3).mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.reshape(-1, 3).std(axis=0), 1.0, atol=1e-3)


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_pyramid_shapes(depth):
    cfg = UNetConfig(base_channels=4, depth=depth)
    net = UNet(cfg, np.random.default_rng(5), d_out=6)
    pyr = net(Tensor(np.random.default_rng(6).normal(size=(16, 16, 8, 1)).astype(np.float32)))
    assert len(pyr.stages) == depth + 1
    for t, stage in enumerate(pyr.stages):
        f = 2 ** (depth - t)
        assert stage.shape == (16 // f, 16 // f, 8 // f, cfg.channels(depth - t))
    assert pyr.last.shape == (16, 16, 8, 6)
    assert len(pyr.skips) == depth


def test_unet_rejects_indivisible_extent():
    net = UNet(UNetConfig(base_channels=2, depth=2), np.random.default_rng(7))
    with pytest.raises(ValueError, match="extent H=6"):
        net(Tensor(np.zeros((8, 6, 8, 1))))


def test_channels_are_capped():
    assert UNetConfig(base_channels=64, max_channels=320).channels(4) == 320


def test_flat_index_round_trip_and_flatten_order():
    extents = (3, 4, 5)
    x = np.random.default_rng(8).normal(size=extents + (2,))
    flat = flatten_spatial(Tensor(x)).data
    for i in range(60):
        z, y, xx = unflat_index(i, extents)
        assert flat_index(z, y, xx, extents) == i
        np.testing.assert_array_equal(flat[i], x[z, y, xx])
