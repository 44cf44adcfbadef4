"""Structure-and-motion stochastic video predictor.

Three variants share one code path:

* ``depth_only``  - static branch only: the next frame is the previous frame
  inverse-warped through predicted depth and ego-pose.
* ``combined``    - adds a dynamic branch whose residual flow warps the static
  prediction; its latent is independent of the static latent.
* ``conditional`` - the dynamic posterior sees motion features computed from
  the static predictor output, which depends on the sampled static latent.

Final frames blend the two branches with a predicted mask
``x = m * x_static + (1 - m) * x_dynamic``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import diffcore as dc
from .geometry import Intrinsics, Pose, ego_flow, flow_warp, inverse_warp
from .latent import DiagonalGaussian, kl_diag_gaussian, sample_reparam, sigma_vae_nll
from .networks import (ConvLSTMState, DepthDecoder, FlowMaskDecoder, GaussianLSTM, Heads, ImageEncoder,
                       PoseDecoder, ConvLSTMCell)

Tensor = torch.Tensor

VARIANTS = ("depth_only", "combined", "conditional")


@dataclass
class ModelConfig:
    variant: str = "conditional"
    n_cond: int = 4
    n_pred_train: int = 4
    n_pred_eval: int = 6
    height: int = 32
    width: int = 64
    enc_channels: tuple[int, ...] = (16, 24, 32, 48, 64)
    enc_strides: tuple[int, ...] = (1, 2, 2, 2, 2)
    convs_per_stage: int = 2
    feat_channels: int = 64
    head_channels: int = 32
    lstm_channels: int = 64
    latent_channels: int = 8
    dec_channels: tuple[int, ...] = (16, 24, 32, 48, 64)
    d_min: float = 0.1
    d_max: float = 100.0
    max_flow: float = 16.0
    pose_scale: float = 0.01
    per_branch_recon: bool = True
    lr: float = 1e-4
    batch_size: int = 4
    accum_steps: int = 1
    seed: int = 0

    def __post_init__(self):
        self.enc_channels = tuple(self.enc_channels)
        self.enc_strides = tuple(self.enc_strides)
        self.dec_channels = tuple(self.dec_channels)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_cond < 2:
            raise ValueError("n_cond must be at least 2")
        if self.n_pred_train < 1 or self.n_pred_eval < 1:
            raise ValueError("prediction horizons must be at least 1")
        if len(self.enc_channels) != len(self.enc_strides) or len(self.dec_channels) != len(self.enc_channels):
            raise ValueError("encoder channel/stride/decoder plans must have equal length")
        if not (0 < self.d_min < self.d_max):
            raise ValueError("need 0 < d_min < d_max")

    @property
    def dynamic(self) -> bool:
        return self.variant != "depth_only"

    @property
    def seq_len(self) -> int:
        return self.n_cond + self.n_pred_train

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("enc_channels", "enc_strides", "dec_channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return dc.config_hash(self.to_dict())

    @classmethod
    def desk(cls, variant: str = "conditional", **kw) -> "ModelConfig":
        """32x64 CPU-scale configuration (full-scale channel plan divided by four)."""
        base = dict(variant=variant, lr=1e-3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def toy(cls, variant: str = "conditional", **kw) -> "ModelConfig":
        """8x16 configuration small enough for exhaustive finite differences."""
        base = dict(variant=variant, height=8, width=16, enc_channels=(3, 4), enc_strides=(1, 2),
                    dec_channels=(3, 4), feat_channels=4, head_channels=4, lstm_channels=4,
                    latent_channels=2, n_cond=2, n_pred_train=1, n_pred_eval=2, batch_size=1, max_flow=4.0)
        base.update(kw)
        return cls(**base)


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

@dataclass
class StepOutput:
    frame: Tensor
    static: Tensor
    depth: Tensor
    pose: Pose
    dynamic: Tensor | None = None
    mask: Tensor | None = None
    flow: Tensor | None = None
    ego_flow: Tensor | None = None


@dataclass
class LatentStep:
    q_s: DiagonalGaussian | None
    p_s: DiagonalGaussian
    z_s: Tensor
    g_s: Tensor
    q_d: DiagonalGaussian | None = None
    p_d: DiagonalGaussian | None = None
    z_d: Tensor | None = None


@dataclass
class ElboBreakdown:
    recon_final: Tensor
    recon_static: Tensor
    recon_dynamic: Tensor
    kl_static: Tensor
    kl_dynamic: Tensor
    total: Tensor
    sigma: float = float("nan")

    def as_floats(self) -> dict[str, float]:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in
                ("total", "recon_final", "recon_static", "recon_dynamic", "kl_static", "kl_dynamic", "sigma")}


@dataclass
class RolloutOutput:
    """One stochastic future. Tensors are ``[B, n_steps, ...]``; ``recon_*``
    hold the posterior reconstructions of context frames 2..n_cond."""
    frames: Tensor
    static: Tensor
    depths: Tensor
    poses: Tensor
    ego_flows: Tensor
    dynamic: Tensor | None
    masks: Tensor | None
    flows: Tensor | None
    recon_frames: Tensor
    recon_depths: Tensor
    seed: int = 0

    @property
    def n_steps(self) -> int:
        return self.frames.shape[1]


@dataclass
class _State:
    lstm: dict[str, ConvLSTMState | None] = field(default_factory=dict)
    e: list = field(default_factory=list)
    skips: list = field(default_factory=list)
    hd: list = field(default_factory=list)
    hp: list = field(default_factory=list)
    hf: list = field(default_factory=list)
    fed: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class StructureMotionModel(nn.Module):

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        self.encoder = ImageEncoder(c.height, c.width, c.enc_channels, c.enc_strides, c.feat_channels,
                                    c.convs_per_stage)
        hc = c.head_channels
        self.heads = Heads(c.feat_channels, hc, hc, hc, hc if c.dynamic else None)
        size = (c.height, c.width)
        self.post_s = GaussianLSTM(2 * hc, c.lstm_channels, c.latent_channels)
        self.prior_s = GaussianLSTM(2 * hc, c.lstm_channels, c.latent_channels)
        self.pred_s = ConvLSTMCell(2 * hc + c.latent_channels, c.feat_channels)
        self.depth_decoder = DepthDecoder(c.feat_channels, c.enc_channels, c.dec_channels, size, c.d_min, c.d_max)
        self.pose_decoder = PoseDecoder(c.feat_channels, hc, c.pose_scale)
        if c.dynamic:
            self.post_d = GaussianLSTM(hc, c.lstm_channels, c.latent_channels)
            self.prior_d = GaussianLSTM(hc, c.lstm_channels, c.latent_channels)
            self.pred_d = ConvLSTMCell(hc + c.latent_channels, c.feat_channels)
            self.flow_decoder = FlowMaskDecoder(c.feat_channels, c.enc_channels, c.dec_channels, size, c.max_flow)
        # test hooks for the variant-algebra invariant
        self.force_zero_flow = False
        self.force_mask: float | None = None

    @property
    def variant(self) -> str:
        return self.config.variant

    def forward(self, frames: Tensor, K: Intrinsics, seed: int = 0, step: int = 0) -> "ElboBreakdown":
        """Teacher-forced bound over ``frames`` (see :func:`sequence_loss`)."""
        return sequence_loss(self, frames, K, seed, step)

    # -- encodings ---------------------------------------------------------

    def _encode_batch(self, frames: Tensor, st: _State) -> None:
        b, n = frames.shape[:2]
        e, skips = self.encoder(frames.flatten(0, 1))
        es = list(e.unflatten(0, (b, n)).unbind(1))
        sk = [list(s.unflatten(0, (b, n)).unbind(1)) for s in skips]
        st.e = es
        st.skips = [[level[t] for level in sk] for t in range(n)]
        st.hd = list(self.heads.depth_features(e).unflatten(0, (b, n)).unbind(1))
        prev = torch.stack([es[0]] + es[:-1], 1).flatten(0, 1)
        st.hp = list(self.heads.pose_features(prev, e).unflatten(0, (b, n)).unbind(1))
        if self.variant == "combined":
            st.hf = list(self.heads.motion_features(prev, e).unflatten(0, (b, n)).unbind(1))
        elif self.variant == "conditional":
            zero = torch.zeros_like(es[0])
            st.hf = [self.heads.motion_features(zero, es[0])]
        st.fed = list(frames.unbind(1))

    def _encode_prediction(self, x: Tensor, g_s: Tensor, st: _State) -> None:
        e, skips = self.encoder(x)
        e_prev = st.e[-1]
        st.e.append(e)
        st.skips.append(skips)
        st.hd.append(self.heads.depth_features(e))
        st.hp.append(self.heads.pose_features(e_prev, e))
        if self.variant == "combined":
            st.hf.append(self.heads.motion_features(e_prev, e))
        elif self.variant == "conditional":
            st.hf.append(self.heads.motion_features(g_s, e))
        st.fed.append(x)

    # -- one time step -----------------------------------------------------

    def posterior_prior_step(self, t: int, st: _State, use_posterior: bool, gen_s: torch.Generator | None,
                             gen_d: torch.Generator | None) -> LatentStep:
        """Latents for target step ``t``.

        Static posterior reads (h^d_t, h^p_{t-1:t}); the static prior reads the
        previous step's features. The dynamic posterior reads h^f_t, which the
        Conditional variant computes from the static predictor output of this
        step; the dynamic prior reads h^f_{t-1}.
        """
        lstm = st.lstm
        prev_static = dc.concat([st.hd[t - 1], st.hp[t - 1]], 1)
        p_stats, lstm["prior_s"] = self.prior_s(prev_static, lstm.get("prior_s"))
        p_s = DiagonalGaussian.from_stats(p_stats)
        q_s = None
        if use_posterior:
            q_stats, lstm["post_s"] = self.post_s(dc.concat([st.hd[t], st.hp[t]], 1), lstm.get("post_s"))
            q_s = DiagonalGaussian.from_stats(q_stats)
        noise = torch.randn(p_s.shape, generator=gen_s, dtype=p_stats.dtype)
        z_s = sample_reparam(q_s if use_posterior else p_s, noise,
                             "posterior" if use_posterior else "prior").value
        lstm["pred_s"] = self.pred_s(dc.concat([prev_static, z_s], 1), lstm.get("pred_s"))
        g_s = lstm["pred_s"].hidden
        step = LatentStep(q_s, p_s, z_s, g_s)
        if not self.config.dynamic:
            return step
        if use_posterior and self.variant == "conditional":
            st.hf.append(self.heads.motion_features(g_s, st.e[t]))
        pd_stats, lstm["prior_d"] = self.prior_d(st.hf[t - 1], lstm.get("prior_d"))
        step.p_d = DiagonalGaussian.from_stats(pd_stats)
        if use_posterior:
            qd_stats, lstm["post_d"] = self.post_d(st.hf[t], lstm.get("post_d"))
            step.q_d = DiagonalGaussian.from_stats(qd_stats)
        noise = torch.randn(step.p_d.shape, generator=gen_d, dtype=pd_stats.dtype)
        step.z_d = sample_reparam(step.q_d if use_posterior else step.p_d, noise).value
        return step

    def predict_step(self, t: int, lat: LatentStep, st: _State, K: Intrinsics, with_ego: bool = False) -> StepOutput:
        prev = st.fed[t - 1]
        skips = st.skips[t - 1]
        depth = self.depth_decoder(lat.g_s, skips)
        pose = self.pose_decoder(lat.g_s)
        x_s = inverse_warp(prev, depth, pose, K)
        out = StepOutput(frame=x_s, static=x_s, depth=depth, pose=pose)
        if self.config.dynamic:
            st.lstm["pred_d"] = self.pred_d(dc.concat([st.hf[t - 1], lat.z_d], 1), st.lstm.get("pred_d"))
            flow, mask = self.flow_decoder(st.lstm["pred_d"].hidden, skips)
            if self.force_zero_flow:
                flow = torch.zeros_like(flow)
            if self.force_mask is not None:
                mask = torch.full_like(mask, self.force_mask)
            x_d = flow_warp(x_s, flow)
            out.frame = combine(x_s, x_d, mask)
            out.dynamic, out.mask, out.flow = x_d, mask, flow
        if with_ego:
            with torch.no_grad():
                out.ego_flow = ego_flow(depth, pose, K)
        return out

    def unroll(self, frames: Tensor, K: Intrinsics, n_total: int, gen_s=None, gen_d=None,
               with_ego: bool = False) -> tuple[list[StepOutput], list[LatentStep]]:
        """Predict steps ``1..n_total-1``.

        The ``frames.shape[1]`` given frames are fed to the encoders and used
        as posterior targets; later steps sample from the prior and feed back
        their own predictions.
        """
        n_obs = frames.shape[1]
        if n_obs < 2 and n_total > n_obs:
            raise ValueError("need at least two observed frames")
        st = _State()
        self._encode_batch(frames, st)
        outs, lats = [], []
        for t in range(1, n_total):
            post = t < n_obs
            lat = self.posterior_prior_step(t, st, post, gen_s, gen_d)
            out = self.predict_step(t, lat, st, K, with_ego)
            if not post:
                self._encode_prediction(out.frame, lat.g_s, st)
            outs.append(out)
            lats.append(lat)
        return outs, lats


def combine(x_static: Tensor, x_dynamic: Tensor, mask: Tensor) -> Tensor:
    """Mask-weighted blend: ``m * x_static + (1 - m) * x_dynamic``."""
    return dc.add(dc.mul(mask, x_static), dc.mul(1.0 - mask, x_dynamic))


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def elbo_loss(outs: Sequence[StepOutput], lats: Sequence[LatentStep], targets: Tensor,
              per_branch: bool = True) -> ElboBreakdown:
    """Negative variational bound, averaged over the batch.

    ``targets`` is ``[B, n, 3, H, W]`` aligned with ``outs``. Reconstruction
    uses the optimal-variance Gaussian likelihood on the final frames and,
    with ``per_branch``, separately on the static and dynamic predictions.
    KL terms are summed over steps.
    """
    if len(outs) != len(lats) or len(outs) != targets.shape[1]:
        raise AssertionError("outputs, latents and targets must cover the same steps")
    b = targets.shape[0]
    final = torch.stack([o.frame for o in outs], 1)
    recon_final, sigma = sigma_vae_nll(final, targets)
    zero = final.new_zeros(())
    recon_static = recon_dynamic = zero
    dynamic = outs[0].dynamic is not None
    if per_branch and dynamic:
        recon_static, _ = sigma_vae_nll(torch.stack([o.static for o in outs], 1), targets)
        recon_dynamic, _ = sigma_vae_nll(torch.stack([o.dynamic for o in outs], 1), targets)
    kl_s = zero
    kl_d = zero
    for lat in lats:
        if lat.q_s is None:
            raise AssertionError("missing static posterior for a training step")
        ks = kl_diag_gaussian(lat.q_s, lat.p_s)
        kl_s = kl_s + ks.mean()
        if dynamic:
            if lat.q_d is None or lat.p_d is None:
                raise AssertionError("missing dynamic posterior/prior pair")
            kl_d = kl_d + kl_diag_gaussian(lat.q_d, lat.p_d).mean()
    recon_final, recon_static, recon_dynamic = recon_final / b, recon_static / b, recon_dynamic / b
    if float(kl_s.detach()) < -1e-6 or float(kl_d.detach()) < -1e-6:
        raise dc.NumericError(f"negative KL: static {float(kl_s.detach())}, dynamic {float(kl_d.detach())}")
    total = recon_final + recon_static + recon_dynamic + kl_s + kl_d
    return ElboBreakdown(recon_final, recon_static, recon_dynamic, kl_s, kl_d, total, float(sigma))


def step_generators(seed: int, step: int, sample: int = 0) -> tuple[torch.Generator, torch.Generator]:
    """Independent noise streams for the static and dynamic latents."""
    ss = np.random.SeedSequence([seed, step, sample])
    a, b = ss.generate_state(2, dtype=np.uint64)
    return torch.Generator().manual_seed(int(a) >> 1), torch.Generator().manual_seed(int(b) >> 1)


def sequence_loss(model: StructureMotionModel, frames: Tensor, K: Intrinsics, seed: int = 0,
                  step: int = 0) -> ElboBreakdown:
    """Teacher-forced posterior unroll over ``frames`` and its bound."""
    gen_s, gen_d = step_generators(seed, step)
    outs, lats = model.unroll(frames, K, frames.shape[1], gen_s, gen_d)
    return elbo_loss(outs, lats, frames[:, 1:], model.config.per_branch_recon)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class Trainer:
    """Single-threaded training loop with per-step seeded data and noise.

    Step ``k`` depends only on ``(seed, k)`` and the parameter/optimizer
    state, so resuming from a checkpoint reproduces the same losses.
    """

    def __init__(self, model: StructureMotionModel, frames: Tensor, K: Intrinsics, seed: int | None = None):
        cfg = model.config
        if frames.dim() != 5 or frames.shape[1] < cfg.seq_len:
            raise ValueError(f"training sequences must hold at least n_cond + n_pred_train = {cfg.seq_len} "
                             f"frames, got shape {tuple(frames.shape)}")
        if tuple(frames.shape[-2:]) != (cfg.height, cfg.width):
            raise ValueError(f"frame size {tuple(frames.shape[-2:])} != config {(cfg.height, cfg.width)}")
        self.model = model
        self.frames = frames
        self.K = K
        self.seed = cfg.seed if seed is None else seed
        self.params = dc.ParameterSet.from_module(model)
        self.opt = dc.OptimizerState.for_params(self.params, lr=cfg.lr)

    @property
    def step(self) -> int:
        return self.opt.step

    def batch_for_step(self, step: int) -> Tensor:
        cfg = self.model.config
        rng = np.random.default_rng([self.seed, step, 7])
        n, length = self.frames.shape[:2]
        b = cfg.batch_size
        idx = rng.choice(n, b, replace=n < b)
        starts = rng.integers(0, length - cfg.seq_len + 1, size=b)
        return torch.stack([self.frames[i, s:s + cfg.seq_len] for i, s in zip(idx, starts)])

    def train_step(self) -> dict[str, float]:
        cfg = self.model.config
        step = self.opt.step + 1
        self.model.train()
        for p in self.params.values():
            p.grad = None
        parts = []
        for micro in range(cfg.accum_steps):
            batch = self.batch_for_step(step * cfg.accum_steps + micro)
            br = sequence_loss(self.model, batch, self.K, self.seed, step * cfg.accum_steps + micro)
            if not torch.isfinite(br.total):
                raise dc.NumericError(f"non-finite loss at step {step}: {br.as_floats()}")
            (br.total / cfg.accum_steps).backward()
            parts.append(br.as_floats())
        dc.adam_step(self.params, self.params.grads(), self.opt)
        return {k: float(np.mean([p[k] for p in parts])) for k in parts[0]}

    # -- checkpoints -------------------------------------------------------

    def state_tensors(self) -> dict[str, Tensor]:
        out = {f"param/{n}": p for n, p in self.params.items()}
        out.update({f"adam_m/{n}": t for n, t in self.opt.m.items()})
        out.update({f"adam_v/{n}": t for n, t in self.opt.v.items()})
        return out

    def save(self, path, extra: dict | None = None) -> None:
        save_model(path, self.model, extra={
            "optimizer": {"lr": self.opt.lr, "beta1": self.opt.beta1, "beta2": self.opt.beta2,
                          "eps": self.opt.eps, "step": self.opt.step},
            "seed": self.seed, **(extra or {})}, tensors=self.state_tensors())

    def load(self, path) -> dict:
        tensors, header = dc.load_checkpoint(path)
        _load_params(self.model, tensors)
        o = header.get("optimizer", {})
        self.opt.step = int(o.get("step", 0))
        self.seed = int(header.get("seed", self.seed))
        for n in self.params:
            if f"adam_m/{n}" in tensors:
                self.opt.m[n] = tensors[f"adam_m/{n}"].clone()
                self.opt.v[n] = tensors[f"adam_v/{n}"].clone()
        return header


def build_id() -> str:
    import subprocess
    from pathlib import Path
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__
    return f"v{__version__}"


def save_model(path, model: StructureMotionModel, extra: dict | None = None,
               tensors: dict[str, Tensor] | None = None) -> None:
    cfg = model.config
    header = {"format": "stochvp-ckpt/v1", "variant": cfg.variant, "config": cfg.to_dict(),
              "config_hash": cfg.hash(), "build": build_id()}
    header.update(extra or {})
    if tensors is None:
        tensors = {f"param/{n}": p for n, p in model.named_parameters()}
    dc.save_checkpoint(path, tensors, header)


def _load_params(model: nn.Module, tensors: dict[str, Tensor]) -> None:
    names = dict(model.named_parameters())
    missing = [n for n in names if f"param/{n}" not in tensors]
    if missing:
        raise dc.CheckpointError(f"checkpoint lacks parameters {missing[:5]}")
    with torch.no_grad():
        for n, p in names.items():
            src = tensors[f"param/{n}"]
            if src.shape != p.shape:
                raise dc.CheckpointError(f"{n}: checkpoint shape {tuple(src.shape)} != {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))


def load_model(path, expect_variant: str | None = None) -> tuple[StructureMotionModel, dict]:
    tensors, header = dc.load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    if expect_variant is not None and cfg.variant != expect_variant:
        raise ValueError(f"checkpoint variant {cfg.variant!r} does not match requested {expect_variant!r}")
    torch.manual_seed(0)
    model = StructureMotionModel(cfg)
    _load_params(model, tensors)
    return model, header


def build_model(config: ModelConfig, seed: int | None = None) -> StructureMotionModel:
    """Seeded construction; torch's default conv init is fan-in scaled uniform."""
    torch.manual_seed(config.seed if seed is None else seed)
    return StructureMotionModel(config)


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

@torch.no_grad()
def rollout(model: StructureMotionModel, context: Tensor, n_steps: int, n_samples: int, K: Intrinsics,
            seed: int = 0, mode: str = "prior", future: Tensor | None = None) -> list[RolloutOutput]:
    """Sample ``n_samples`` futures of ``n_steps`` frames after ``context``.

    ``mode="prior"`` samples latents from the learned priors after the
    context; ``mode="posterior"`` also feeds ``future`` ground truth and
    reconstructs it with posterior latents.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n_cond = context.shape[1]
    if n_cond < 2:
        raise ValueError("context needs at least two frames")
    model.eval()
    frames = context
    if mode == "posterior":
        if future is None or future.shape[1] < n_steps:
            raise ValueError("posterior rollout needs n_steps ground-truth future frames")
        frames = torch.cat([context, future[:, :n_steps]], 1)
    elif mode != "prior":
        raise ValueError(f"unknown rollout mode {mode!r}")
    results = []
    for s in range(n_samples):
        gen_s, gen_d = step_generators(seed, -1 & 0x7FFFFFFF, s)
        outs, _ = model.unroll(frames, K, n_cond + n_steps, gen_s, gen_d, with_ego=True)
        ctx, fut = outs[:n_cond - 1], outs[n_cond - 1:]

        def stack(items, attr):
            vals = [getattr(o, attr) for o in items]
            return None if vals[0] is None else torch.stack(vals, 1)

        results.append(RolloutOutput(
            frames=stack(fut, "frame"), static=stack(fut, "static"), depths=stack(fut, "depth"),
            poses=torch.stack([o.pose.as_vector() for o in fut], 1), ego_flows=stack(fut, "ego_flow"),
            dynamic=stack(fut, "dynamic"), masks=stack(fut, "mask"), flows=stack(fut, "flow"),
            recon_frames=stack(ctx, "frame"), recon_depths=stack(ctx, "depth"), seed=seed))
    return results
