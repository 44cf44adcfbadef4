"""Invariant suite: gradient checks, geometry oracles, variational checks and
synthetic ground-truth consistency. Each check reports module, invariant and seed."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch

from . import diffcore as dc
from . import geometry as geo
from . import latent as lat
from .networks import ConvLSTMState, conv_lstm_step

GRAD_TOL = 1e-4
MODEL_EPS_LADDER = (1e-4, 1e-5, 1e-6)


@dataclass
class CheckResult:
    module: str
    invariant: str
    seed: int
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.module}.{self.invariant} seed={self.seed} value={self.value:.3g} " \
               f"threshold={self.threshold:.3g}{(' ' + self.detail) if self.detail else ''}"


def _result(module, invariant, seed, value, threshold, below=True, detail="") -> CheckResult:
    ok = bool(value < threshold) if below else bool(value >= threshold)
    if not math.isfinite(value):
        ok = False
    return CheckResult(module, invariant, seed, ok, float(value), float(threshold), detail)


def _r(rng, *shape, low=-1.0, high=1.0):
    return torch.from_numpy(rng.uniform(low, high, size=shape))


def _frac_safe_grid(rng, b, h, w, hs, ws):
    """Random sampling coordinates whose fractional parts avoid the bilinear kinks."""
    ix = rng.integers(-1, ws, size=(b, h, w))
    iy = rng.integers(-1, hs, size=(b, h, w))
    fx = rng.uniform(0.15, 0.85, size=(b, h, w))
    fy = rng.uniform(0.15, 0.85, size=(b, h, w))
    return torch.from_numpy(np.stack([ix + fx, iy + fy], 1))


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

def _weighted(fn: Callable, rng, *args_shape_fn):
    """Scalar probe ``sum(w * fn(...))`` with a fixed random weight."""
    cache = {}

    def f(xs):
        out = fn(xs)
        if "w" not in cache:
            cache["w"] = _r(rng, *out.shape)
        return (out * cache["w"]).sum()
    return f


def primitive_grad_checks(seeds: Iterable[int]) -> list[CheckResult]:
    out = []
    for name, prim in dc.primitive_suite().items():
        for s in seeds:
            rng = np.random.default_rng([s, 11])
            inputs, kw = prim.sample(rng)
            f = _weighted(lambda xs: prim(*xs, **kw), rng)
            out.append(_result("diffcore", f"grad_check[{name}]", s, dc.grad_check(f, inputs), GRAD_TOL))
    return out


def _geometry_cases(rng):
    b, h, w = 1, 5, 7
    K = geo.Intrinsics(fx=6.0, fy=6.0, cx=3.0, cy=2.0)
    img = _r(rng, b, 2, h, w, low=0, high=1)
    depth = _r(rng, b, 1, h, w, low=2.0, high=4.0)
    pose = torch.cat([_r(rng, b, 3, low=-0.05, high=0.05), _r(rng, b, 3, low=-0.2, high=0.2)], 1)
    return b, h, w, K, img, depth, pose


def geometry_grad_checks(seeds: Iterable[int]) -> list[CheckResult]:
    out = []
    for s in seeds:
        rng = np.random.default_rng([s, 12])
        b, h, w, K, img, depth, pose = _geometry_cases(rng)
        grid = _frac_safe_grid(rng, b, 4, 6, h, w)
        f = _weighted(lambda xs: geo.bilinear_sample(xs[0], xs[1]), rng)
        out.append(_result("geometry", "grad_check[bilinear_sample]", s, dc.grad_check(f, [img, grid]), GRAD_TOL))

        f = _weighted(lambda xs: geo.inverse_warp(xs[0], xs[1], geo.Pose.from_vector(xs[2]), K), rng)
        out.append(_result("geometry", "grad_check[inverse_warp]", s,
                           dc.grad_check(f, [img, depth, pose]), GRAD_TOL))

        flow = _frac_safe_grid(rng, b, h, w, h, w) - geo.pixel_grid(b, h, w, torch.float64)
        f = _weighted(lambda xs: geo.flow_warp(xs[0], xs[1]), rng)
        out.append(_result("geometry", "grad_check[flow_warp]", s, dc.grad_check(f, [img, flow]), GRAD_TOL))
    return out


def latent_grad_checks(seeds: Iterable[int]) -> list[CheckResult]:
    out = []
    for s in seeds:
        rng = np.random.default_rng([s, 13])
        shape = (2, 3, 2, 2)
        mq, lq, mp, lp = (_r(rng, *shape) for _ in range(4))
        f = lambda xs: lat.kl_diag_gaussian(lat.DiagonalGaussian(xs[0], xs[1]),
                                            lat.DiagonalGaussian(xs[2], xs[3])).sum()
        out.append(_result("latent", "grad_check[kl_diag_gaussian]", s, dc.grad_check(f, [mq, lq, mp, lp]), GRAD_TOL))
        noise = _r(rng, *shape)
        f = _weighted(lambda xs: lat.sample_reparam(lat.DiagonalGaussian(xs[0], xs[1]), noise).value, rng)
        out.append(_result("latent", "grad_check[sample_reparam]", s, dc.grad_check(f, [mq, lq]), GRAD_TOL))
        pred, target = _r(rng, *shape), _r(rng, *shape)
        f = lambda xs: lat.sigma_vae_nll(xs[0], xs[1])[0]
        out.append(_result("latent", "grad_check[sigma_vae_nll]", s, dc.grad_check(f, [pred, target]), GRAD_TOL))
    return out


def convlstm_grad_checks(seeds: Iterable[int]) -> list[CheckResult]:
    out = []
    for s in seeds:
        rng = np.random.default_rng([s, 14])
        b, cin, hid, h, w = 1, 2, 2, 3, 3
        x, hh, cc = _r(rng, b, cin, h, w), _r(rng, b, hid, h, w), _r(rng, b, hid, h, w)
        weight = _r(rng, 4 * hid, cin + hid, 3, 3, low=-0.5, high=0.5)
        bias = _r(rng, 4 * hid)

        def f(xs, rng=rng):
            st = conv_lstm_step(ConvLSTMState(xs[1], xs[2]), xs[0], xs[3], xs[4])
            return st.hidden.sum() + 0.5 * st.cell.sum()
        out.append(_result("networks", "grad_check[conv_lstm_step]", s,
                           dc.grad_check(f, [x, hh, cc, weight, bias]), GRAD_TOL))
    return out


def model_loss_grad_checks(seeds: Iterable[int], variant: str = "conditional",
                           max_coords: int = 2) -> list[CheckResult]:
    """Full bound on the 8x16 toy configuration w.r.t. every parameter tensor
    (``max_coords`` random coordinates each) and the input frames.

    Parameters are jittered away from initialisation so that no layer is
    exactly zero (the flow head starts zeroed) and gradients sit well above
    round-off."""
    from .model import ModelConfig, build_model

    out = []
    for s in seeds:
        cfg = ModelConfig.toy(variant, seed=s)
        model = build_model(cfg).double()
        rng = np.random.default_rng([s, 15])
        with torch.no_grad():
            for p in model.parameters():
                p.add_(_r(rng, *p.shape, low=-0.3, high=0.3))
        names = [n for n, _ in model.named_parameters()]
        params = [p.detach().clone() for p in model.parameters()]
        # smooth frames keep the warps away from pixel-grid kinks
        base = _r(rng, 1, cfg.seq_len, 3, 2, 4, low=0.2, high=0.8)
        frames = torch.nn.functional.interpolate(base.flatten(0, 1), size=(cfg.height, cfg.width),
                                                 mode="bicubic", align_corners=True).unflatten(0, (1, cfg.seq_len))
        K = geo.Intrinsics.centered(cfg.height, cfg.width)
        n = frames[:, 1:].numel()

        def f(xs):
            p = dict(zip(names, xs[:-1]))
            return torch.func.functional_call(model, p, (xs[-1], K, s)).total / n

        err = dc.grad_check(f, params + [frames], epsilon=MODEL_EPS_LADDER, max_coords=max_coords, seed=s)
        out.append(_result("model", f"grad_check[elbo_loss:{variant}]", s, err, GRAD_TOL))
    return out


# ---------------------------------------------------------------------------
# geometry oracles
# ---------------------------------------------------------------------------

def geometry_oracles(seeds: Iterable[int]) -> list[CheckResult]:
    out = []
    for s in seeds:
        rng = np.random.default_rng([s, 21])
        b, h, w = 2, 12, 16
        K = geo.Intrinsics(fx=float(rng.uniform(8, 16)), fy=float(rng.uniform(8, 16)),
                           cx=float(rng.uniform(5, 10)), cy=float(rng.uniform(4, 7)))
        img = _r(rng, b, 3, h, w, low=0, high=1)
        depth = _r(rng, b, 1, h, w, low=1.0, high=10.0)
        warped = geo.inverse_warp(img, depth, geo.Pose.identity(b, torch.float64), K)
        err = float((warped - img)[..., 1:-1, 1:-1].abs().max())
        out.append(_result("geometry", "identity_warp", s, err, 1e-6))

        # pinhole oracle for pure translation
        t = rng.uniform(-0.5, 0.5, size=(b, 3))
        pose = geo.Pose(torch.zeros(b, 3, dtype=torch.float64), torch.from_numpy(t))
        grid = geo.sampling_grid_from_depth_pose(depth, pose, K).numpy()
        d = depth.numpy()[:, 0]
        vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        X, Y = (uu - K.cx) / K.fx * d, (vv - K.cy) / K.fy * d
        zs = d - t[:, 2, None, None]
        u_src = K.fx * (X - t[:, 0, None, None]) / zs + K.cx
        v_src = K.fy * (Y - t[:, 1, None, None]) / zs + K.cy
        err = max(np.abs(grid[:, 0] - u_src).max(), np.abs(grid[:, 1] - v_src).max())
        out.append(_result("geometry", "translation_oracle", s, float(err), 1e-5))

        # lateral ego flow is proportional to inverse depth
        lateral = geo.Pose(torch.zeros(b, 3, dtype=torch.float64),
                           torch.from_numpy(np.c_[t[:, :2], np.zeros(b)]))
        f1 = geo.ego_flow(depth, lateral, K)
        f2 = geo.ego_flow(2.0 * depth, lateral, K)
        err = float((f1 - 2.0 * f2).abs().max())
        out.append(_result("geometry", "inverse_depth_proportional", s, err, 1e-12))
    return out


# ---------------------------------------------------------------------------
# variational checks
# ---------------------------------------------------------------------------

def variational_checks(seeds: Iterable[int], n_mc: int = 1_000_000) -> list[CheckResult]:
    out = []
    for s in seeds:
        rng = np.random.default_rng([s, 31])
        dim = 4
        mq, mp = rng.normal(0, 1, dim), rng.normal(0, 1, dim)
        lq, lp = rng.uniform(-1, 0.5, dim), rng.uniform(-1, 0.5, dim)
        q = lat.DiagonalGaussian(torch.tensor(mq)[None], torch.tensor(lq)[None])
        p = lat.DiagonalGaussian(torch.tensor(mp)[None], torch.tensor(lp)[None])
        kl = float(lat.kl_diag_gaussian(q, p))
        z = mq + np.exp(lq) * rng.standard_normal((n_mc, dim))

        def logpdf(x, m, ls):
            return (-0.5 * ((x - m) / np.exp(ls)) ** 2 - ls - 0.5 * math.log(2 * math.pi)).sum(1)

        d = logpdf(z, mq, lq) - logpdf(z, mp, lp)
        se = d.std(ddof=1) / math.sqrt(n_mc)
        out.append(_result("latent", "kl_vs_monte_carlo", s, abs(kl - d.mean()) / se, 3.0,
                           detail=f"closed={kl:.5f} mc={d.mean():.5f}"))
        out.append(_result("latent", "kl_self_zero", s, abs(float(lat.kl_diag_gaussian(q, q))), 1e-300))

        pred, target = _r(rng, 2, 3, 4, 5), _r(rng, 2, 3, 4, 5)
        _, sigma = lat.sigma_vae_nll(pred, target)
        mse = float(((pred - target) ** 2).mean())
        out.append(_result("latent", "sigma_equals_mse", s, abs(float(sigma) ** 2 - mse), 1e-6))
    return out


# ---------------------------------------------------------------------------
# synthetic ground truth
# ---------------------------------------------------------------------------

def synthetic_gt_checks(seeds: Iterable[int], n_frames: int = 8, height: int = 32, width: int = 64,
                        tol: float = 2e-2) -> list[CheckResult]:
    from .synthdata import generate, gt_reconstruction, sample_scene_spec

    out = []
    for s in seeds:
        batch = generate(sample_scene_spec(s, n_frames=n_frames, height=height, width=width))
        worst = 0.0
        for t in range(1, batch.n_frames):
            vis = batch.visibility[t - 1, 0] > 0
            if vis.any():
                worst = max(worst, float(np.abs(gt_reconstruction(batch, t) - batch.frames[t])[:, vis].mean()))
        out.append(_result("synthdata", "gt_consistency", s, worst, tol))
        bg = batch.fg_masks[1:] == 0
        ego = geo.ego_flow(torch.from_numpy(batch.depths[1:]), geo.Pose.from_vector(torch.from_numpy(batch.poses)),
                           batch.intrinsics).numpy()
        diff = np.abs(ego - batch.total_flows)[np.broadcast_to(bg, ego.shape)]
        out.append(_result("synthdata", "bg_total_equals_ego", s, float(diff.max(initial=0.0)), 1e-300))
    return out


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------

GROUPS: dict[str, Callable[[list[int]], list[CheckResult]]] = {
    "primitives": primitive_grad_checks,
    "geometry_grad": geometry_grad_checks,
    "latent_grad": latent_grad_checks,
    "convlstm_grad": convlstm_grad_checks,
    "model_grad": model_loss_grad_checks,
    "geometry": geometry_oracles,
    "variational": variational_checks,
    "synthdata": synthetic_gt_checks,
}


def run_suite(n_seeds: int = 20, groups: Iterable[str] | None = None,
              log: Callable[[str], None] | None = None) -> list[CheckResult]:
    seeds = list(range(n_seeds))
    results = []
    for g in (groups or GROUPS):
        if g not in GROUPS:
            raise KeyError(f"unknown check group {g!r}; available: {sorted(GROUPS)}")
        t0 = time.time()
        res = GROUPS[g](seeds)
        results.extend(res)
        if log:
            bad = [r for r in res if not r.passed]
            log(f"[{g}] {len(res) - len(bad)}/{len(res)} passed in {time.time() - t0:.1f}s")
            for r in bad:
                log("  " + r.line())
    return results
