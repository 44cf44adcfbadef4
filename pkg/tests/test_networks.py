import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stochvp import networks as N
from stochvp.diffcore import DimensionError, grad_check
from stochvp.geometry import Pose


def zero_params(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def randomize(module, seed, scale=0.5):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


# -- ConvLSTM ---------------------------------------------------------------------

def test_conv_lstm_zero_params_halves_cell():
    c = torch.randn(1, 2, 3, 3, dtype=torch.float64)
    state = N.ConvLSTMState(torch.randn(1, 2, 3, 3, dtype=torch.float64), c)
    w = torch.zeros(8, 3, 3, 3, dtype=torch.float64)
    out = N.conv_lstm_step(state, torch.randn(1, 1, 3, 3, dtype=torch.float64), w, torch.zeros(8, dtype=torch.float64))
    assert torch.allclose(out.cell, 0.5 * c, atol=1e-15)
    assert torch.allclose(out.hidden, 0.5 * torch.tanh(0.5 * c), atol=1e-15)


def test_conv_lstm_zero_state_persists():
    state = N.ConvLSTMState.zeros(1, 2, 3, 3, torch.zeros(1))
    out = N.conv_lstm_step(state, torch.zeros(1, 1, 3, 3), torch.zeros(8, 3, 3, 3), torch.zeros(8))
    assert (out.cell == 0).all() and (out.hidden == 0).all()


@pytest.mark.parametrize("seed", range(3))
def test_conv_lstm_grad_check(seed):
    rng = np.random.default_rng(seed)
    r = lambda *s: torch.from_numpy(rng.uniform(-1, 1, s))
    h, c, x, w, b = r(1, 2, 3, 3), r(1, 2, 3, 3), r(1, 1, 3, 3), r(8, 3, 3, 3), r(8)

    def f(xs):
        out = N.conv_lstm_step(N.ConvLSTMState(h, c), xs[0], xs[1], xs[2])
        return (out.hidden * 1.3 + out.cell).sum()

    assert grad_check(f, [x, w, b]) < 1e-4


def test_conv_lstm_bounded_over_50_steps():
    cell = randomize(N.ConvLSTMCell(2, 3), 0, 1.0)
    x = torch.rand(1, 2, 4, 4) * 2 - 1
    state = None
    for t in range(50):
        state = cell(x, state)
        # |f*c + i*g| <= |c| + 1 per step
        assert state.cell.abs().max() <= t + 1 + 1e-5
        assert state.hidden.abs().max() <= 1.0
        assert torch.isfinite(state.cell).all()


# -- encoder ------------------------------------------------------------------

def test_desk_encoder_bottleneck():
    enc = N.ImageEncoder(32, 64, (16, 24, 32, 48, 64), (1, 2, 2, 2, 2), 64)
    e, skips = N.encode_image(enc, torch.rand(2, 3, 32, 64))
    # 64 wide by 32 tall gives a 4 wide by 2 tall bottleneck
    assert tuple(e.shape) == (2, 64, 2, 4)
    assert [tuple(s.shape[-2:]) for s in skips] == [(32, 64), (16, 32), (8, 16), (4, 8), (2, 4)]


def test_full_scale_encoder_bottleneck():
    enc = N.ImageEncoder(92, 310, (64, 96, 128, 196, 256), (2, 2, 2, 2, 2), 128, convs_per_stage=1)
    with torch.no_grad():
        e, skips = enc(torch.zeros(1, 3, 92, 310))
    assert tuple(e.shape[1:]) == (128, 3, 10)
    assert tuple(skips[0].shape[-2:]) == (46, 155)


def test_encoder_deterministic():
    enc = N.ImageEncoder(8, 16, (3, 4), (1, 2), 4)
    x = torch.rand(1, 3, 8, 16)
    a, _ = enc(torch.cat([x, x]))
    assert torch.equal(a[0], a[1])


def test_encoder_wrong_resolution():
    enc = N.ImageEncoder(8, 16, (3, 4), (1, 2), 4)
    with pytest.raises(DimensionError):
        enc(torch.rand(1, 3, 8, 8))


def test_skip_resolutions_strictly_decrease():
    res = N.encoder_resolutions(32, 64, (2, 2, 2, 2))
    assert all(a[0] > b[0] and a[1] > b[1] for a, b in zip(res, res[1:]))


# -- heads ------------------------------------------------------------------------

def test_heads_shapes_and_zero_motion():
    heads = N.Heads(4, 6, 5, 3, 7)
    e = torch.rand(2, 4, 2, 4)
    hd, hp, hf = heads(e, e, torch.rand(2, 4, 2, 4))
    assert tuple(hd.shape) == (2, 5, 2, 4)
    assert tuple(hp.shape) == (2, 3, 2, 4)
    assert tuple(hf.shape) == (2, 7, 2, 4)
    assert torch.isfinite(hp).all()


def test_motion_head_requires_static_features():
    heads = N.Heads(4, 6, 5, 3, 7)
    with pytest.raises(ValueError):
        heads.motion_features(None, torch.rand(1, 4, 2, 2))


def test_motion_head_grad_check():
    heads = N.Heads(2, 3, 2, 2, 2).double()
    randomize(heads, 1)
    rng = np.random.default_rng(0)
    e = torch.from_numpy(rng.uniform(-1, 1, (1, 2, 2, 2)))
    g = torch.from_numpy(rng.uniform(-1, 1, (1, 2, 2, 2)))
    w = torch.from_numpy(rng.uniform(-1, 1, (1, 2, 2, 2)))
    assert grad_check(lambda xs: (heads.motion_features(xs[0], e) * w).sum(), [g],
                      epsilon=(1e-5, 1e-6, 1e-7)) < 1e-4


# -- decoders ------------------------------------------------------------------

def _skips(batch=1):
    return [torch.rand(batch, 3, 8, 16), torch.rand(batch, 4, 4, 8)]


def test_depth_sigmoid_zero_value():
    a, b = 1 / 0.1 - 1 / 100, 1 / 100
    d = N.disparity_to_depth(torch.zeros(1), 0.1, 100.0)
    assert d.item() == pytest.approx(1 / (0.5 * a + b), rel=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_decoder_ranges_random_params(seed):
    dd = randomize(N.DepthDecoder(4, (3, 4), (5, 6), (8, 16)), seed, 2.0)
    fm = randomize(N.FlowMaskDecoder(4, (3, 4), (5, 6), (8, 16), max_flow=16.0), seed + 100, 2.0)
    pd = randomize(N.PoseDecoder(4, 8), seed + 200, 50.0)
    g = torch.randn(2, 4, 4, 8)
    d = N.decode_depth(dd, g, _skips(2))
    assert tuple(d.shape) == (2, 1, 8, 16)
    assert (d >= 0.1 * (1 - 1e-6)).all() and (d <= 100 * (1 + 1e-6)).all()
    flow, mask = N.decode_flow_and_mask(fm, g, _skips(2))
    assert (flow.norm(dim=1) <= 16 * math.sqrt(2)).all() and (flow.abs() <= 16).all()
    assert (mask >= 0).all() and (mask <= 1).all()
    pose = N.decode_pose(pd, g)
    assert (pose.rotation.norm(dim=1) < math.pi).all()


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_decoder_range_property(seed):
    torch.manual_seed(seed)
    fm = N.FlowMaskDecoder(2, (2,), (3,), (4, 4), max_flow=3.0)
    randomize(fm, seed, 3.0)
    flow, mask = fm(torch.randn(1, 2, 2, 2) * 5, [torch.randn(1, 2, 4, 4)])
    assert (flow.abs() <= 3.0).all()
    assert (mask >= 0).all() and (mask <= 1).all()


def test_zero_params_pose_is_identity():
    pd = zero_params(N.PoseDecoder(4, 8))
    pose = pd(torch.rand(2, 4, 2, 2))
    assert isinstance(pose, Pose)
    assert (pose.as_vector() == 0).all()


def test_zero_params_flow_zero_mask_half():
    fm = zero_params(N.FlowMaskDecoder(4, (3, 4), (5, 6), (8, 16)))
    flow, mask = fm(torch.rand(1, 4, 4, 8), _skips())
    assert (flow == 0).all()
    assert (mask == 0.5).all()


def test_flow_decoder_starts_at_zero_flow():
    fm = N.FlowMaskDecoder(4, (3, 4), (5, 6), (8, 16))
    flow, mask = fm(torch.rand(1, 4, 4, 8), _skips())
    assert (flow == 0).all() and (mask == 0.5).all()


def test_pose_decoder_grad_check():
    pd = randomize(N.PoseDecoder(2, 3).double(), 0)
    g = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, (1, 2, 2, 2)))
    w = torch.tensor([[1.0, -0.5, 0.3, 0.7, -1.1, 0.2]], dtype=torch.float64)
    assert grad_check(lambda xs: (pd(xs[0]).as_vector() * w).sum(), [g], epsilon=(1e-5, 1e-6, 1e-7)) < 1e-4


def test_toy_stack_grad_check_end_to_end():
    torch.manual_seed(0)
    enc = N.ImageEncoder(8, 16, (3, 4), (1, 2), 4).double()
    dd = N.DepthDecoder(4, (3, 4), (3, 4), (8, 16)).double()
    for m in (enc, dd):
        randomize(m, 3, 0.4)
    x = torch.from_numpy(np.random.default_rng(1).uniform(0, 1, (1, 3, 8, 16)))

    def f(xs):
        e, skips = enc(xs[0])
        return dd(e, skips).log().sum()

    assert grad_check(f, [x], max_coords=30, epsilon=(1e-5, 1e-6, 1e-7)) < 1e-4
