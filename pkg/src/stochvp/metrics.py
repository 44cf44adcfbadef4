"""Image, depth and diversity metrics plus report writers."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 100.0
MASK_FILL = 0.5
DEPTH_KEYS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")


def _as_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    return t.to(torch.float64)


def _check_pair(a, b) -> tuple[torch.Tensor, torch.Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / mse)`` for images in [0, 1], capped at 100 dB."""
    a, b = _check_pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a, b, window: int = 7, sigma: float = 1.5) -> float:
    """Mean SSIM over valid window positions and channels.

    Accepts ``[C,H,W]`` or ``[N,C,H,W]``; uses the standard constants
    ``C1 = 0.01^2`` and ``C2 = 0.03^2`` for unit dynamic range.
    """
    a, b = _check_pair(a, b)
    if window % 2 == 0 or window < 1:
        raise ValueError("ssim window must be odd and positive")
    if a.dim() == 3:
        a, b = a[None], b[None]
    if a.dim() != 4:
        raise ValueError("ssim expects [C,H,W] or [N,C,H,W]")
    if window > min(a.shape[-2:]):
        raise ValueError(f"ssim window {window} exceeds image size {tuple(a.shape[-2:])}")
    c = a.shape[1]
    w = _gaussian_window(window, sigma).expand(c, 1, window, window)
    blur = lambda x: F.conv2d(x, w, groups=c)
    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a ** 2
    sbb = blur(b * b) - mu_b ** 2
    sab = blur(a * b) - mu_a * mu_b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    s = num / den
    return float(s.mean().clamp(-1.0, 1.0))


def depth_metrics(pred, gt, valid=None, median_scaling: bool = True) -> dict[str, float]:
    """Eigen-protocol depth errors on valid pixels."""
    pred, gt = _check_pair(pred, gt)
    mask = gt > 0 if valid is None else (_as_tensor(valid) > 0) & (gt > 0)
    if mask.shape != gt.shape:
        raise ValueError("valid mask shape mismatch")
    if not bool(mask.any()):
        raise ValueError("depth_metrics: empty valid mask")
    p, g = pred[mask], gt[mask]
    if bool((p <= 0).any()):
        raise ValueError("predicted depth must be positive")
    if median_scaling:
        p = p * (g.median() / p.median())
    ratio = torch.maximum(p / g, g / p)
    return {
        "abs_rel": float(((p - g).abs() / g).mean()),
        "sq_rel": float(((p - g) ** 2 / g).mean()),
        "rmse": float(((p - g) ** 2).mean().sqrt()),
        "rmse_log": float(((p.log() - g.log()) ** 2).mean().sqrt()),
        "a1": float((ratio < 1.25).double().mean()),
        "a2": float((ratio < 1.25 ** 2).double().mean()),
        "a3": float((ratio < 1.25 ** 3).double().mean()),
    }


def mask_region(img, mask) -> torch.Tensor:
    """Keep pixels where ``mask`` is 1; paint the rest mid gray."""
    img, m = _as_tensor(img), _as_tensor(mask)
    if not bool(((m == 0) | (m == 1)).all()):
        raise ValueError("mask must be binary")
    return torch.where(m > 0, img, torch.full_like(img, MASK_FILL))


@dataclass
class FramePairMetrics:
    psnr: list[float]
    ssim: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))


def frame_metrics(pred, gt, window: int = 7) -> FramePairMetrics:
    """Per-step PSNR/SSIM for ``[T,C,H,W]`` sequences."""
    pred, gt = _check_pair(pred, gt)
    return FramePairMetrics([psnr(p, g) for p, g in zip(pred, gt)], [ssim(p, g, window) for p, g in zip(pred, gt)])


def masked_metrics(pred, gt, fg_mask, window: int = 7) -> dict[str, FramePairMetrics | None]:
    """Separate foreground and background scores; an empty region maps to ``None``.

    ``fg_mask`` is ``[T,1,H,W]`` (or broadcastable) and binary.
    """
    pred, gt = _check_pair(pred, gt)
    m = _as_tensor(fg_mask).expand_as(pred)
    out: dict[str, FramePairMetrics | None] = {}
    for name, region in (("fg", m), ("bg", 1.0 - m)):
        if not bool(region.any()):
            out[name] = None
            continue
        out[name] = frame_metrics(mask_region(pred, region), mask_region(gt, region), window)
    return out


def best_of_n(samples: Sequence, gt, window: int = 7) -> tuple[int, FramePairMetrics]:
    """Index of the sample with highest mean PSNR (lowest index on ties) and its scores."""
    if len(samples) == 0:
        raise ValueError("best_of_n needs at least one sample")
    best, best_score = 0, -math.inf
    for i, s in enumerate(samples):
        score = float(np.mean([psnr(p, g) for p, g in zip(_as_tensor(s), _as_tensor(gt))]))
        if score > best_score:
            best, best_score = i, score
    return best, frame_metrics(samples[best], gt, window)


def diversity_std(samples: Sequence) -> torch.Tensor:
    """Population standard deviation across samples, ``[T,C,H,W]``."""
    if len(samples) < 2:
        raise ValueError("diversity needs at least two samples")
    x = torch.stack([_as_tensor(s) for s in samples])
    return x.std(0, unbiased=False)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


@dataclass
class MetricReport:
    """Aggregated metrics over evaluation episodes.

    ``per_step`` maps metric name to a list over episodes of per-step lists.
    Intervals are standard errors over episodes.
    """
    per_step: dict[str, list[list[float]]] = field(default_factory=dict)
    scalars: dict[str, list[float]] = field(default_factory=dict)
    chosen: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    notices: list[str] = field(default_factory=list)

    def add_curve(self, name: str, values: Sequence[float]) -> None:
        self.per_step.setdefault(name, []).append([float(v) for v in values])

    def add_scalar(self, name: str, value: float) -> None:
        self.scalars.setdefault(name, []).append(float(value))

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for name, eps in sorted(self.per_step.items()):
            m, se = mean_stderr([float(np.mean(e)) for e in eps])
            out[name] = {"mean": m, "stderr": se, "n": len(eps)}
        for name, vals in sorted(self.scalars.items()):
            m, se = mean_stderr(vals)
            out[name] = {"mean": m, "stderr": se, "n": len(vals)}
        return out

    def curves(self) -> list[tuple[int, str, float, float]]:
        rows = []
        for name, eps in sorted(self.per_step.items()):
            steps = min(len(e) for e in eps)
            for t in range(steps):
                m, se = mean_stderr([e[t] for e in eps])
                rows.append((t + 1, name, m, se))
        return rows

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "summary": self.summary(), "chosen_samples": self.chosen,
                           "per_step": self.per_step, "notices": self.notices}, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "metric", "mean", "stderr"])
        for step, name, m, se in self.curves():
            w.writerow([step, name, f"{m:.6f}", f"{se:.6f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        rows = [(k, f"{v['mean']:.4f}", f"{v['stderr']:.4f}", str(v["n"])) for k, v in self.summary().items()]
        header = ("metric", "mean", "stderr", "n")
        widths = [max(len(r[i]) for r in rows + [header]) for i in range(4)]
        line = lambda r: "  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r))
        return "\n".join([line(header), line(tuple("-" * w for w in widths))] + [line(r) for r in rows]) + "\n"
