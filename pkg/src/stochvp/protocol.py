"""Evaluation protocols over a dataset: best-of-N frame metrics, foreground /
background scores, future-depth accuracy and sample diversity."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .metrics import MetricReport, best_of_n, depth_metrics, diversity_std, masked_metrics
from .model import RolloutOutput, StructureMotionModel, rollout
from .synthdata import SequenceBatch

PROTOCOLS = ("frames", "fgbg", "depth", "diversity")


def sample_futures(model: StructureMotionModel, batches: Sequence[SequenceBatch], n_cond: int, horizon: int,
                   n_samples: int, seed: int = 0, chunk: int = 16) -> list[RolloutOutput]:
    """Roll out every sequence; returns one :class:`RolloutOutput` per sample
    with the sequence index on the batch axis."""
    frames = torch.from_numpy(np.stack([b.frames[:n_cond] for b in batches]))
    parts = []
    for i in range(0, len(batches), chunk):
        parts.append(rollout(model, frames[i:i + chunk], horizon, n_samples, batches[0].intrinsics, seed=seed))
    if len(parts) == 1:
        return parts[0]
    merged = []
    for s in range(n_samples):
        fields = {}
        for name in RolloutOutput.__dataclass_fields__:
            vals = [getattr(p[s], name) for p in parts]
            fields[name] = vals[0] if not isinstance(vals[0], torch.Tensor) else torch.cat(vals, 0)
        merged.append(RolloutOutput(**fields))
    return merged


def evaluate(model: StructureMotionModel, batches: Sequence[SequenceBatch], n_cond: int, horizon: int,
             n_samples: int, seed: int = 0, protocols: Sequence[str] = PROTOCOLS, window: int = 7,
             median_scaling: bool = True) -> tuple[MetricReport, list[RolloutOutput]]:
    for p in protocols:
        if p not in PROTOCOLS:
            raise ValueError(f"unknown protocol {p!r}; expected a subset of {PROTOCOLS}")
    report = MetricReport(meta={"n_cond": n_cond, "horizon": horizon, "n_samples": n_samples, "seed": seed,
                                "variant": model.config.variant, "n_sequences": len(batches)})
    available = min(b.n_frames for b in batches) - n_cond
    if available < horizon:
        report.notices.append(f"horizon {horizon} exceeds available ground truth ({available}); metrics skipped")
        return report, sample_futures(model, batches, n_cond, horizon, n_samples, seed)
    if "diversity" in protocols and n_samples < 2:
        raise ValueError("diversity protocol needs n_samples >= 2")
    samples = sample_futures(model, batches, n_cond, horizon, n_samples, seed)
    has_masks = all(b.fg_masks is not None for b in batches)
    has_depth = all(b.depths is not None for b in batches)
    if "fgbg" in protocols and not has_masks:
        report.notices.append("fgbg skipped: dataset lacks foreground masks")
    if "depth" in protocols and not has_depth:
        report.notices.append("depth skipped: dataset lacks depth maps")
    if "diversity" in protocols and not has_masks:
        report.notices.append("diversity fg/bg split skipped: dataset lacks foreground masks")
    for i, b in enumerate(batches):
        gt = b.frames[n_cond:n_cond + horizon]
        cand = [s.frames[i] for s in samples]
        idx, fm = best_of_n(cand, gt, window)
        report.chosen.append(idx)
        if "frames" in protocols:
            report.add_curve("psnr", fm.psnr)
            report.add_curve("ssim", fm.ssim)
        if "fgbg" in protocols and has_masks:
            mm = masked_metrics(cand[idx], gt, b.fg_masks[n_cond:n_cond + horizon], window)
            for region, r in mm.items():
                if r is None:
                    report.notices.append(f"sequence {i}: empty {region} region")
                    continue
                report.add_curve(f"psnr_{region}", r.psnr)
                report.add_curve(f"ssim_{region}", r.ssim)
        if "depth" in protocols and has_depth:
            dm = depth_metrics(samples[idx].depths[i], b.depths[n_cond:n_cond + horizon],
                               median_scaling=median_scaling)
            for k, v in dm.items():
                report.add_scalar(f"depth_{k}", v)
        if "diversity" in protocols:
            std = diversity_std(cand).mean(1, keepdim=True)
            report.add_scalar("diversity_mean", float(std.mean()))
            if has_masks:
                fg = torch.from_numpy(b.fg_masks[n_cond:n_cond + horizon]) > 0
                if fg.any() and (~fg).any():
                    report.add_scalar("diversity_fg", float(std[fg].mean()))
                    report.add_scalar("diversity_bg", float(std[~fg].mean()))
    return report, samples


def diversity_ratio(report: MetricReport) -> float:
    """Pooled mean foreground std over pooled mean background std."""
    fg, bg = report.scalars.get("diversity_fg"), report.scalars.get("diversity_bg")
    if not fg or not bg:
        return float("nan")
    return float(np.mean(fg) / np.mean(bg))
