import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from saltlab import tensor as T
from saltlab.channel import ChannelSpec, apply_channel, apply_channel_differentiable, sample_mask
from saltlab.errors import ConfigurationError
from saltlab.rng import RngStream


def features(shape=(8, 16, 4, 4), seed=0):
    return np.random.default_rng(seed).normal(size=shape).astype(np.float32)


def test_identity_and_zero_parameters_are_exact():
    z = features()
    for spec in (ChannelSpec.identity(), ChannelSpec.packet_loss(0.0), ChannelSpec.gaussian_noise(0.0)):
        out = apply_channel(spec, z, RngStream(0))
        assert out is z or np.array_equal(out, z)


def test_full_loss_zeroes_everything():
    out = apply_channel(ChannelSpec.packet_loss(1.0), features(), RngStream(1))
    assert np.array_equal(out, np.zeros_like(out))


def test_drop_fraction():
    z = np.ones(1_000_000, np.float32)
    out = apply_channel(ChannelSpec.packet_loss(0.25), z, RngStream(2))
    assert abs(np.mean(out == 0) - 0.25) < 0.0013


def test_noise_std():
    z = np.zeros(1_000_000, np.float32)
    out = apply_channel(ChannelSpec.gaussian_noise(0.5), z, RngStream(3))
    # 3-sigma bound for the sample std of n normal draws: sigma * 3 / sqrt(2n)
    assert abs(out.std() - 0.5) < 0.5 * 3 / np.sqrt(2 * z.size)
    assert abs(out.mean()) < 0.5 * 3 / np.sqrt(z.size)


def test_mask_keeps_values_unchanged():
    z = features()
    out = apply_channel(ChannelSpec.packet_loss(0.5), z, RngStream(4))
    kept = out != 0
    np.testing.assert_array_equal(out[kept], z[kept])


def test_same_stream_same_draws():
    z = features()
    spec = ChannelSpec.compose(ChannelSpec.packet_loss(0.3), ChannelSpec.gaussian_noise(0.2))
    a = apply_channel(spec, z, RngStream(7).fork("x"))
    b = apply_channel(spec, z, RngStream(7).fork("x"))
    c = apply_channel(spec, z, RngStream(7).fork("y"))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_differentiable_matches_forward_and_masks_gradient():
    z = features((4, 3, 2, 2))
    spec = ChannelSpec.compose(ChannelSpec.packet_loss(0.4), ChannelSpec.gaussian_noise(0.3))
    plain = apply_channel(spec, z, RngStream(5))
    t = T.Tensor(z, requires_grad=True)
    out = apply_channel_differentiable(spec, t, RngStream(5))
    np.testing.assert_array_equal(out.data, plain)
    T.tensor_sum(out).backward()
    keep = sample_mask(0.4, z.shape, RngStream(5))
    np.testing.assert_array_equal(t.grad, keep)


def test_tensor_in_tensor_out():
    out = apply_channel(ChannelSpec.gaussian_noise(0.1), T.Tensor(features()), RngStream(0))
    assert isinstance(out, T.Tensor)


def test_spec_validation_and_serialization():
    with pytest.raises(ConfigurationError):
        ChannelSpec.packet_loss(1.5)
    with pytest.raises(ConfigurationError):
        ChannelSpec.gaussian_noise(-0.1)
    with pytest.raises(ConfigurationError):
        ChannelSpec("erasure")
    spec = ChannelSpec.compose(ChannelSpec.packet_loss(0.25), ChannelSpec.gaussian_noise(0.5))
    assert ChannelSpec.from_dict(spec.to_dict()) == spec
    assert ChannelSpec.from_dict(None) == ChannelSpec.identity()


@given(st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_mask_is_binary_and_shape_preserving(p, seed):
    mask = sample_mask(p, (5, 7), RngStream(seed))
    assert mask.shape == (5, 7) and set(np.unique(mask)) <= {0.0, 1.0}


@given(st.floats(0.0, 2.0), st.integers(0, 2**32 - 1))
def test_noise_preserves_shape_and_dtype(sigma, seed):
    z = features((2, 3, 2, 2))
    out = apply_channel(ChannelSpec.gaussian_noise(sigma), z, RngStream(seed))
    assert out.shape == z.shape and out.dtype == z.dtype
