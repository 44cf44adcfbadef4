import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stochvp import geometry as G
from stochvp import verify
from stochvp.latent import DiagonalGaussian
from stochvp.model import (VARIANTS, LatentStep, ModelConfig, StepOutput, Trainer, build_model, combine,
                           elbo_loss, load_model, rollout, save_model, step_generators)


def smooth_frames(n_seq, length, h=8, w=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    base = torch.rand(n_seq * length, 3, 3, 5, generator=g) * 0.6 + 0.2
    up = torch.nn.functional.interpolate(base, size=(h, w), mode="bicubic", align_corners=True)
    return up.clamp(0, 1).unflatten(0, (n_seq, length))


def toy(variant, **kw):
    cfg = ModelConfig.toy(variant, **kw)
    return build_model(cfg), G.Intrinsics.centered(cfg.height, cfg.width)


def jitter(model, seed, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_((torch.rand(p.shape, generator=g, dtype=p.dtype) * 2 - 1) * scale)
    return model


# -- config --------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="bogus")
    with pytest.raises(ValueError):
        ModelConfig(n_cond=1)
    with pytest.raises(ValueError):
        ModelConfig(n_pred_eval=0)


def test_config_round_trip_and_hash():
    cfg = ModelConfig.desk("combined")
    back = ModelConfig.from_dict(cfg.to_dict())
    assert back == cfg and back.hash() == cfg.hash()
    assert ModelConfig.desk("conditional").hash() != cfg.hash()
    with pytest.raises(ValueError):
        ModelConfig.from_dict({**cfg.to_dict(), "nope": 1})


# -- mask blend -----------------------------------------------------------------

def test_combine_endpoints_and_midpoint():
    xs, xd = torch.full((1, 3, 2, 2), 0.2), torch.full((1, 3, 2, 2), 0.6)
    assert torch.equal(combine(xs, xd, torch.ones(1, 1, 2, 2)), xs)
    assert torch.equal(combine(xs, xd, torch.zeros(1, 1, 2, 2)), xd)
    assert torch.allclose(combine(xs, xd, torch.full((1, 1, 2, 2), 0.5)), torch.full((1, 3, 2, 2), 0.4))


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_combine_is_convex(seed):
    g = torch.Generator().manual_seed(seed)
    xs, xd = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64), torch.rand(1, 3, 4, 4, generator=g,
                                                                                  dtype=torch.float64)
    m = torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64)
    x = combine(xs, xd, m)
    assert (x >= torch.minimum(xs, xd) - 1e-15).all()
    assert (x <= torch.maximum(xs, xd) + 1e-15).all()


@pytest.mark.parametrize("variant", ["combined", "conditional"])
def test_model_outputs_are_convex_blends(variant):
    model, K = toy(variant)
    jitter(model, 1)
    outs, _ = model.unroll(smooth_frames(2, 4), K, 4, *step_generators(0, 0))
    for o in outs:
        assert (o.frame >= torch.minimum(o.static, o.dynamic) - 1e-6).all()
        assert (o.frame <= torch.maximum(o.static, o.dynamic) + 1e-6).all()


# -- variant algebra -------------------------------------------------------------

@pytest.mark.parametrize("mode", ["prior", "posterior"])
def test_conditional_reduces_to_depth_only(mode):
    cond, K = toy("conditional")
    jitter(cond, 2)
    depth, _ = toy("depth_only")
    shared = depth.state_dict()
    src = cond.state_dict()
    assert set(shared) <= set(src)
    depth.load_state_dict({k: src[k] for k in shared})
    cond.force_zero_flow = True
    cond.force_mask = 1.0
    frames = smooth_frames(2, 6)
    a = rollout(cond, frames[:, :3], 3, 2, K, seed=5, mode=mode, future=frames[:, 3:])
    b = rollout(depth, frames[:, :3], 3, 2, K, seed=5, mode=mode, future=frames[:, 3:])
    for sa, sb in zip(a, b):
        assert torch.equal(sa.frames, sb.frames)
        assert torch.equal(sa.depths, sb.depths)
        assert torch.equal(sa.recon_frames, sb.recon_frames)


def test_depth_only_has_no_dynamic_branch():
    model, K = toy("depth_only")
    outs = rollout(model, smooth_frames(1, 3), 2, 1, K)
    assert outs[0].flows is None and outs[0].masks is None and outs[0].dynamic is None
    _, lats = model.unroll(smooth_frames(1, 3), K, 3, *step_generators(0, 0))
    assert all(l.q_d is None and l.p_d is None for l in lats)


# -- posterior / prior wiring --------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
def test_first_step_distributions_finite(variant):
    model, K = toy(variant)
    _, lats = model.unroll(smooth_frames(1, 3), K, 3, *step_generators(0, 0))
    first = lats[0]
    for d in (first.q_s, first.p_s, first.q_d, first.p_d):
        if d is not None:
            assert torch.isfinite(d.mean).all() and torch.isfinite(d.log_std).all()


def test_posterior_during_context_prior_after():
    model, K = toy("conditional")
    _, lats = model.unroll(smooth_frames(1, 3), K, 6, *step_generators(0, 0))
    assert [l.q_s is not None for l in lats] == [True, True, False, False, False]
    assert [l.q_d is not None for l in lats] == [True, True, False, False, False]


def _dynamic_posterior_means(variant, static_seed):
    model, K = toy(variant)
    jitter(model, 3)
    frames = smooth_frames(1, 3)
    gen_s = torch.Generator().manual_seed(static_seed)
    gen_d = torch.Generator().manual_seed(99)
    _, lats = model.unroll(frames, K, 3, gen_s, gen_d)
    return lats[1].q_d.mean


def test_combined_dynamic_posterior_ignores_static_latent():
    assert torch.equal(_dynamic_posterior_means("combined", 0), _dynamic_posterior_means("combined", 1))


def test_conditional_dynamic_posterior_depends_on_static_latent():
    assert not torch.equal(_dynamic_posterior_means("conditional", 0), _dynamic_posterior_means("conditional", 1))


# -- objective ------------------------------------------------------------------

def _manual_step(q_mean, p_mean, dynamic=False):
    shape = (1, 1, 1, 1)
    q = DiagonalGaussian(torch.full(shape, q_mean, dtype=torch.float64), torch.zeros(shape, dtype=torch.float64))
    p = DiagonalGaussian(torch.full(shape, p_mean, dtype=torch.float64), torch.zeros(shape, dtype=torch.float64))
    lat = LatentStep(q, p, q.mean, q.mean)
    frame = torch.full((1, 3, 2, 2), 0.5, dtype=torch.float64)
    out = StepOutput(frame=frame, static=frame, depth=torch.ones(1, 1, 2, 2), pose=G.Pose.identity(1))
    if dynamic:
        lat.q_d, lat.p_d, lat.z_d = q, q, q.mean
        out.dynamic, out.mask = frame, torch.ones(1, 1, 2, 2)
    return out, lat


def test_elbo_zero_kl_when_posterior_equals_prior():
    out, lat = _manual_step(0.3, 0.3, dynamic=True)
    target = torch.full((1, 1, 3, 2, 2), 0.4, dtype=torch.float64)
    br = elbo_loss([out], [lat], target)
    assert br.kl_static.item() == 0.0 and br.kl_dynamic.item() == 0.0
    assert br.total.item() == pytest.approx((br.recon_final + br.recon_static + br.recon_dynamic).item(), rel=1e-15)


def test_elbo_static_kl_hand_gaussians():
    out, lat = _manual_step(2.0, 0.0)
    br = elbo_loss([out], [lat], torch.full((1, 1, 3, 2, 2), 0.5, dtype=torch.float64))
    assert br.kl_static.item() == pytest.approx(2.0, abs=1e-12)


def test_elbo_missing_pair_asserts():
    out, lat = _manual_step(0.0, 0.0)
    lat.q_s = None
    with pytest.raises(AssertionError):
        elbo_loss([out], [lat], torch.zeros(1, 1, 3, 2, 2, dtype=torch.float64))


def test_elbo_per_branch_flag():
    model, K = toy("conditional")
    frames = smooth_frames(1, 3)
    on = model(frames, K)
    model.config.per_branch_recon = False
    off = model(frames, K)
    assert on.recon_static.item() != 0 and off.recon_static.item() == 0
    assert on.recon_final.item() == off.recon_final.item()


@pytest.mark.parametrize("variant", VARIANTS)
def test_elbo_grad_check_toy(variant):
    res = verify.model_loss_grad_checks([0], variant)
    assert all(r.passed for r in res), [r.line() for r in res]


# -- training -----------------------------------------------------------------

def test_train_step_deterministic():
    frames = smooth_frames(3, 4)
    runs = []
    for _ in range(2):
        model, K = toy("conditional")
        tr = Trainer(model, frames, K)
        runs.append([tr.train_step()["total"] for _ in range(3)])
    assert runs[0] == runs[1]


def test_train_step_short_batch_rejected():
    model, K = toy("conditional", n_cond=3, n_pred_train=2)
    with pytest.raises(ValueError):
        Trainer(model, smooth_frames(2, 4), K)


def test_overfit_constant_scene():
    frames = smooth_frames(1, 1).expand(1, 4, 3, 8, 16).contiguous()
    model, K = toy("conditional", lr=1e-3)
    tr = Trainer(model, frames, K)
    recon = [tr.train_step()["recon_final"] for _ in range(200)]
    assert np.median(recon[-20:]) < np.median(recon[:20])


def test_kl_terms_nonnegative_during_training():
    model, K = toy("combined")
    tr = Trainer(model, smooth_frames(3, 4), K)
    for _ in range(10):
        r = tr.train_step()
        assert r["kl_static"] >= 0 and r["kl_dynamic"] >= 0


def test_resume_is_bit_exact(tmp_path):
    frames = smooth_frames(3, 4)
    model, K = toy("conditional")
    tr = Trainer(model, frames, K)
    straight = [tr.train_step()["total"] for _ in range(4)]

    model, K = toy("conditional")
    tr = Trainer(model, frames, K)
    first = [tr.train_step()["total"] for _ in range(2)]
    tr.save(tmp_path / "mid.ckpt")
    fresh, _ = toy("conditional", seed=123)
    tr2 = Trainer(fresh, frames, K)
    tr2.load(tmp_path / "mid.ckpt")
    second = [tr2.train_step()["total"] for _ in range(2)]
    assert first + second == straight


# -- rollout --------------------------------------------------------------------

def test_rollout_lengths():
    model, K = toy("conditional")
    outs = rollout(model, smooth_frames(1, 10), 20, 1, K)
    o = outs[0]
    assert o.frames.shape[1] == 20 and o.depths.shape[1] == 20 and o.flows.shape[1] == 20
    assert o.poses.shape == (1, 20, 6)
    assert o.recon_frames.shape[1] == 9


def test_rollout_samples_differ_and_repeat():
    model, K = toy("conditional")
    jitter(model, 4)
    ctx = smooth_frames(1, 3)
    a = rollout(model, ctx, 3, 2, K, seed=1)
    b = rollout(model, ctx, 3, 2, K, seed=1)
    assert all(torch.equal(x.frames, y.frames) for x, y in zip(a, b))
    assert float((a[0].frames - a[1].frames).abs().max()) > 0


def test_rollout_frames_in_unit_range():
    model, K = toy("combined")
    jitter(model, 5)
    o = rollout(model, smooth_frames(2, 3), 4, 2, K)[0]
    assert o.frames.min() >= 0 and o.frames.max() <= 1


def test_rollout_errors():
    model, K = toy("conditional")
    with pytest.raises(ValueError):
        rollout(model, smooth_frames(1, 3), 0, 1, K)
    with pytest.raises(ValueError):
        rollout(model, smooth_frames(1, 3), 2, 1, K, mode="posterior")


def test_flow_decomposition_recomposes():
    """x^d(u) = x_prev(grid(u + f(u))), with grid = identity + ego flow."""
    model, K = toy("conditional", max_flow=1.5)
    jitter(model, 6)
    # toy scene geometry: a tilted plane seen from a camera moving forward and sideways
    rows = torch.linspace(3.0, 5.0, 8).view(1, 1, 8, 1).expand(1, 1, 8, 16)
    model.depth_decoder.forward = lambda g, skips: rows.expand(g.shape[0], 1, 8, 16)
    model.pose_decoder.forward = lambda g: G.Pose.from_vector(
        torch.tensor([[0.0, 0.02, 0.0, 0.05, 0.0, 0.1]]).expand(g.shape[0], 6))
    # affine frames: bilinear resampling is exact on them, leaving only the composition to test
    yy, xx = torch.meshgrid(torch.arange(8.0), torch.arange(16.0), indexing="ij")
    ramp = torch.stack([0.1 + 0.04 * xx, 0.2 + 0.05 * yy + 0.01 * xx, 0.9 - 0.03 * xx - 0.02 * yy])
    frames = ramp.expand(1, 3, 3, 8, 16).contiguous()
    with torch.no_grad():
        outs, _ = model.unroll(frames, K, 3, *step_generators(0, 0), with_ego=True)
    o = outs[-1]
    prev = frames[:, 1]
    h, w = prev.shape[-2:]
    assert float(o.flow.abs().max()) > 0.1
    pix = G.pixel_grid(1, h, w)
    ego_at = G.bilinear_sample(o.ego_flow, pix + o.flow)
    total = pix + o.flow + ego_at
    recomposed = G.bilinear_sample(prev, total)
    inner = (G.in_bounds_mask(pix + o.flow, h, w) * G.in_bounds_mask(total, h, w))[0, 0] > 0
    inner[:2] = inner[-2:] = False
    inner[:, :2] = inner[:, -2:] = False
    assert inner.sum() > 10
    err = (recomposed - o.dynamic)[0].abs().amax(0)[inner]
    assert float(err.max()) < 1e-3
    # composing in the wrong order is caught
    wrong = G.bilinear_sample(prev, pix + o.ego_flow + o.flow)
    assert float((wrong - o.dynamic)[0].abs().amax(0)[inner].max()) > 1e-3


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model, K = toy("combined")
    jitter(model, 7)
    save_model(tmp_path / "m.ckpt", model)
    loaded, header = load_model(tmp_path / "m.ckpt", expect_variant="combined")
    assert header["config_hash"] == model.config.hash()
    for (n, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert torch.equal(a, b), n
    ctx = smooth_frames(1, 3)
    assert torch.equal(rollout(model, ctx, 2, 1, K)[0].frames, rollout(loaded, ctx, 2, 1, K)[0].frames)


def test_checkpoint_variant_mismatch(tmp_path):
    model, _ = toy("combined")
    save_model(tmp_path / "m.ckpt", model)
    with pytest.raises(ValueError, match="variant"):
        load_model(tmp_path / "m.ckpt", expect_variant="conditional")


def test_parameter_counts_by_variant():
    counts = {v: sum(p.numel() for p in build_model(ModelConfig.desk(v)).parameters()) for v in VARIANTS}
    assert counts["combined"] == counts["conditional"] > counts["depth_only"]
