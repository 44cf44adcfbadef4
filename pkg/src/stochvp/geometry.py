"""Pinhole-camera warping: depth + pose sampling grids, bilinear sampling,
flow warping and ego-motion flow.

Conventions: right-handed camera frame with x right, y down, z forward;
pixel (0, 0) is the top-left pixel centre and grids are in pixel units.
A :class:`Pose` ``(R, t)`` maps points from the source (previous) camera
frame into the target camera frame, ``P_tgt = R @ P_src + t``, so a warp
that looks up source pixels for target pixels applies ``R^T (P - t)``.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import torch

from .diffcore import DimensionError

Tensor = torch.Tensor

# grid value written for points that land behind the source camera
OUT_OF_FRUSTUM = -1.0e4
_MIN_Z = 1e-6
_SMALL_ANGLE = 1e-8


class GeometryError(ValueError):
    """Raised when a geometric precondition (positive depth, bounded flow) fails."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def validate(self, height: int, width: int) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx <= width - 1 and 0 <= self.cy <= height - 1):
            raise GeometryError(f"principal point ({self.cx}, {self.cy}) outside {width}x{height} image")

    @classmethod
    def centered(cls, height: int, width: int, focal: float | None = None) -> "Intrinsics":
        """Square pixels, principal point at the image centre, 90 degree hfov by default."""
        f = width / 2.0 if focal is None else focal
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0)

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        return Intrinsics(self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5)

    def as_list(self) -> list[float]:
        return [self.fx, self.fy, self.cx, self.cy]


def _hat(w: Tensor) -> Tensor:
    """Batched skew-symmetric matrices, ``[B,3] -> [B,3,3]``."""
    z = torch.zeros_like(w[:, 0])
    wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
    return torch.stack([
        torch.stack([z, -wz, wy], -1),
        torch.stack([wz, z, -wx], -1),
        torch.stack([-wy, wx, z], -1),
    ], -2)


def axis_angle_to_matrix(w: Tensor) -> Tensor:
    """Exponential map (Rodrigues) with a series expansion near zero."""
    theta2 = (w * w).sum(-1)
    small = theta2 < _SMALL_ANGLE ** 2
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / (theta * theta))
    k = _hat(w)
    eye = torch.eye(3, dtype=w.dtype, device=w.device).expand_as(k)
    return eye + a[:, None, None] * k + b[:, None, None] * (k @ k)


def matrix_to_axis_angle(r: Tensor) -> Tensor:
    """Logarithm of rotation matrices with angle below pi."""
    vee = torch.stack([r[:, 2, 1] - r[:, 1, 2], r[:, 0, 2] - r[:, 2, 0], r[:, 1, 0] - r[:, 0, 1]], -1)
    cos = ((r[:, 0, 0] + r[:, 1, 1] + r[:, 2, 2] - 1.0) / 2.0).clamp(-1.0, 1.0)
    theta = torch.acos(cos)
    sin = torch.sin(theta)
    small = theta < 1e-6
    scale = torch.where(small, torch.full_like(theta, 0.5), theta / (2.0 * torch.where(small, torch.ones_like(sin), sin)))
    return scale[:, None] * vee


@dataclass
class Pose:
    """Batched rigid transform: axis-angle ``rotation`` [B,3], ``translation`` [B,3]."""
    rotation: Tensor
    translation: Tensor

    def __post_init__(self):
        if self.rotation.shape != self.translation.shape or self.rotation.dim() != 2 or self.rotation.shape[1] != 3:
            raise DimensionError(
                f"pose expects [B,3] rotation and translation, got {tuple(self.rotation.shape)} "
                f"and {tuple(self.translation.shape)}")

    @classmethod
    def identity(cls, batch: int = 1, dtype=torch.float32) -> "Pose":
        z = torch.zeros(batch, 3, dtype=dtype)
        return cls(z, z.clone())

    @classmethod
    def from_vector(cls, v: Tensor) -> "Pose":
        """``[B,6]`` = (rx, ry, rz, tx, ty, tz)."""
        return cls(v[:, :3], v[:, 3:6])

    def as_vector(self) -> Tensor:
        return torch.cat([self.rotation, self.translation], -1)

    @property
    def batch(self) -> int:
        return self.rotation.shape[0]

    def matrix(self) -> Tensor:
        return axis_angle_to_matrix(self.rotation)

    def inverse(self) -> "Pose":
        rt = self.matrix().transpose(1, 2)
        return Pose(matrix_to_axis_angle(rt), -(rt @ self.translation[..., None])[..., 0])

    def compose(self, other: "Pose") -> "Pose":
        """Apply ``other`` first, then ``self``."""
        ra, rb = self.matrix(), other.matrix()
        r = ra @ rb
        t = (ra @ other.translation[..., None])[..., 0] + self.translation
        return Pose(matrix_to_axis_angle(r), t)

    def transform_points(self, pts: Tensor) -> Tensor:
        """``[B,3,N]`` source-frame points to the target frame."""
        return self.matrix() @ pts + self.translation[..., None]


def pixel_grid(batch: int, height: int, width: int, dtype=torch.float32, device=None) -> Tensor:
    """Identity sampling grid ``[B,2,H,W]`` holding (x, y) pixel coordinates."""
    ys, xs = torch.meshgrid(torch.arange(height, dtype=dtype, device=device),
                            torch.arange(width, dtype=dtype, device=device), indexing="ij")
    return torch.stack([xs, ys], 0).unsqueeze(0).expand(batch, 2, height, width)


def _check_depth(depth: Tensor) -> None:
    if depth.dim() != 4 or depth.shape[1] != 1:
        raise DimensionError(f"depth must be [B,1,H,W], got {tuple(depth.shape)}")
    if not bool((depth > 0).all()):
        raise GeometryError("depth must be strictly positive")


def sampling_grid_from_depth_pose(depth: Tensor, pose: Pose, K: Intrinsics) -> Tensor:
    """Source-pixel coordinates for every target pixel.

    Each target pixel is backprojected at its depth, moved into the source
    camera with ``R^T (P - t)`` and projected with ``K``. Points with
    non-positive source depth get :data:`OUT_OF_FRUSTUM` and zero gradient.
    """
    _check_depth(depth)
    b, _, h, w = depth.shape
    if pose.batch != b:
        raise DimensionError(f"pose batch {pose.batch} != depth batch {b}")
    base = pixel_grid(b, h, w, depth.dtype, depth.device)
    x = (base[:, 0] - K.cx) / K.fx * depth[:, 0]
    y = (base[:, 1] - K.cy) / K.fy * depth[:, 0]
    pts = torch.stack([x, y, depth[:, 0]], 1).reshape(b, 3, -1)
    r = pose.matrix().to(depth.dtype)
    src = r.transpose(1, 2) @ (pts - pose.translation.to(depth.dtype)[..., None])
    z = src[:, 2]
    valid = z > _MIN_Z
    z_safe = torch.where(valid, z, torch.ones_like(z))
    u = K.fx * src[:, 0] / z_safe + K.cx
    v = K.fy * src[:, 1] / z_safe + K.cy
    flag = torch.full_like(u, OUT_OF_FRUSTUM)
    grid = torch.stack([torch.where(valid, u, flag), torch.where(valid, v, flag)], 1)
    return grid.reshape(b, 2, h, w)


# ---------------------------------------------------------------------------
# bilinear sampler with hand-written backward
# ---------------------------------------------------------------------------

_SAMPLER_GRAD_SCALE = 1.0


@contextlib.contextmanager
def corrupted_sampler_gradient(scale: float = 1.5):
    """Test hook: multiply the sampler's grid gradient by ``scale``."""
    global _SAMPLER_GRAD_SCALE
    prev = _SAMPLER_GRAD_SCALE
    _SAMPLER_GRAD_SCALE = scale
    try:
        yield
    finally:
        _SAMPLER_GRAD_SCALE = prev


def _corners(grid: Tensor, h: int, w: int):
    x, y = grid[:, 0], grid[:, 1]
    x0f, y0f = torch.floor(x), torch.floor(y)
    wx, wy = x - x0f, y - y0f
    x0, y0 = x0f.long(), y0f.long()
    out = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(grid.shape[0], -1)
            out.append((idx, valid.reshape(grid.shape[0], -1)))
    return out, wx.reshape(grid.shape[0], -1), wy.reshape(grid.shape[0], -1)


class _BilinearSample(torch.autograd.Function):

    @staticmethod
    def forward(ctx, source: Tensor, grid: Tensor) -> Tensor:
        b, c, h, w = source.shape
        ho, wo = grid.shape[-2:]
        corners, wx, wy = _corners(grid, h, w)
        flat = source.reshape(b, c, h * w)
        vals = []
        for idx, valid in corners:
            v = torch.gather(flat, 2, idx[:, None, :].expand(b, c, -1))
            vals.append(v * valid[:, None, :].to(source.dtype))
        va, vb, vc, vd = vals
        wx1, wy1 = wx[:, None], wy[:, None]
        out = (1 - wx1) * (1 - wy1) * va + wx1 * (1 - wy1) * vb + (1 - wx1) * wy1 * vc + wx1 * wy1 * vd
        ctx.save_for_backward(source, grid)
        return out.reshape(b, c, ho, wo)

    @staticmethod
    def backward(ctx, grad_out: Tensor):
        source, grid = ctx.saved_tensors
        b, c, h, w = source.shape
        ho, wo = grid.shape[-2:]
        corners, wx, wy = _corners(grid, h, w)
        go = grad_out.reshape(b, c, -1)
        wx1, wy1 = wx[:, None], wy[:, None]
        weights = [(1 - wx1) * (1 - wy1), wx1 * (1 - wy1), (1 - wx1) * wy1, wx1 * wy1]
        grad_src = grad_grid = None
        flat = source.reshape(b, c, h * w)
        vals = []
        for idx, valid in corners:
            m = valid[:, None, :].to(source.dtype)
            vals.append(torch.gather(flat, 2, idx[:, None, :].expand(b, c, -1)) * m)
        if ctx.needs_input_grad[0]:
            gs = torch.zeros_like(flat)
            for (idx, valid), wgt in zip(corners, weights):
                contrib = go * wgt * valid[:, None, :].to(source.dtype)
                gs.scatter_add_(2, idx[:, None, :].expand(b, c, -1), contrib)
            grad_src = gs.reshape(b, c, h, w)
        if ctx.needs_input_grad[1]:
            va, vb, vc, vd = vals
            dx = (1 - wy1) * (vb - va) + wy1 * (vd - vc)
            dy = (1 - wx1) * (vc - va) + wx1 * (vd - vb)
            gx = (go * dx).sum(1)
            gy = (go * dy).sum(1)
            grad_grid = torch.stack([gx, gy], 1).reshape(b, 2, ho, wo) * _SAMPLER_GRAD_SCALE
        return grad_src, grad_grid


def bilinear_sample(source: Tensor, grid: Tensor) -> Tensor:
    """Sample ``source`` [B,C,H,W] at pixel coordinates ``grid`` [B,2,H',W'].

    Corners outside the image contribute zero (zero padding).
    """
    if source.dim() != 4 or grid.dim() != 4 or grid.shape[1] != 2 or grid.shape[0] != source.shape[0]:
        raise DimensionError(f"bilinear_sample: source {tuple(source.shape)} / grid {tuple(grid.shape)} mismatch")
    if not bool(torch.isfinite(grid).all()):
        raise GeometryError("sampling grid contains non-finite entries")
    return _BilinearSample.apply(source, grid.to(source.dtype))


def in_bounds_mask(grid: Tensor, height: int, width: int) -> Tensor:
    """``[B,1,H,W]`` mask of grid points whose sample lies fully inside the source."""
    x, y = grid[:, 0:1], grid[:, 1:2]
    return ((x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)).to(grid.dtype)


def inverse_warp(previous: Tensor, depth: Tensor, pose: Pose, K: Intrinsics) -> Tensor:
    """Static prediction: resample ``previous`` through target depth and pose."""
    if previous.shape[0] != depth.shape[0] or previous.shape[-2:] != depth.shape[-2:]:
        raise DimensionError(f"inverse_warp: image {tuple(previous.shape)} vs depth {tuple(depth.shape)}")
    grid = sampling_grid_from_depth_pose(depth, pose, K)
    return bilinear_sample(previous, grid)


def flow_warp(image: Tensor, flow: Tensor) -> Tensor:
    """Backward warp: ``out(u) = image(u + flow(u))``."""
    if flow.dim() != 4 or flow.shape[1] != 2 or flow.shape[0] != image.shape[0] or flow.shape[-2:] != image.shape[-2:]:
        raise DimensionError(f"flow_warp: image {tuple(image.shape)} vs flow {tuple(flow.shape)}")
    if not bool(torch.isfinite(flow).all()):
        raise GeometryError("flow contains non-finite values")
    h, w = image.shape[-2:]
    diag = math.hypot(h, w)
    if bool((flow.detach().norm(dim=1) >= diag).any()):
        raise GeometryError(f"flow magnitude exceeds image diagonal {diag:.2f}")
    grid = pixel_grid(image.shape[0], h, w, flow.dtype, flow.device) + flow
    return bilinear_sample(image, grid)


def ego_flow(depth: Tensor, pose: Pose, K: Intrinsics) -> Tensor:
    """Displacement induced by camera motion alone: ``grid - identity``.

    Out-of-frustum pixels keep the sentinel offset; use :func:`in_bounds_mask`
    on the grid to exclude them.
    """
    grid = sampling_grid_from_depth_pose(depth, pose, K)
    b, _, h, w = depth.shape
    return grid - pixel_grid(b, h, w, grid.dtype, grid.device)
