"""Learned components: image encoder, feature heads, ConvLSTM cells and decoders.

All convolutions route through :mod:`stochvp.diffcore` primitives; the
modules only own parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from . import diffcore as dc
from .geometry import Pose

Tensor = torch.Tensor


class Conv(nn.Conv2d):
    """3x3 (or kxk) convolution with symmetric padding through ``diffcore.conv2d``."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, padding: int | None = None):
        super().__init__(cin, cout, k, stride=stride, padding=k // 2 if padding is None else padding)

    def forward(self, x: Tensor) -> Tensor:
        return dc.conv2d(x, self.weight, self.bias, stride=self.stride[0], padding=self.padding[0])


class ConvT(nn.ConvTranspose2d):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, padding: int = 1):
        super().__init__(cin, cout, k, stride=stride, padding=padding)

    def forward(self, x: Tensor) -> Tensor:
        return dc.conv_transpose2d(x, self.weight, self.bias, stride=self.stride[0], padding=self.padding[0])


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        r = max(1, channels // reduction)
        self.fc1 = Conv(channels, r, k=1)
        self.fc2 = Conv(r, channels, k=1)

    def forward(self, x: Tensor) -> Tensor:
        return dc.squeeze_excite(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


# ---------------------------------------------------------------------------
# ConvLSTM
# ---------------------------------------------------------------------------

@dataclass
class ConvLSTMState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int, like: Tensor) -> "ConvLSTMState":
        z = like.new_zeros(batch, channels, height, width)
        return cls(z, z.clone())


def conv_lstm_step(state: ConvLSTMState, x: Tensor, weight: Tensor, bias: Tensor) -> ConvLSTMState:
    """One ConvLSTM update; ``weight`` maps ``[x, h]`` to the stacked (i, f, o, g) gates."""
    if state.hidden.shape != state.cell.shape:
        raise dc.DimensionError("ConvLSTM hidden/cell shapes differ")
    gates = dc.conv2d(dc.concat([x, state.hidden], 1), weight, bias, stride=1, padding=weight.shape[-1] // 2)
    i, f, o, g = gates.chunk(4, dim=1)
    i, f, o, g = dc.sigmoid(i), dc.sigmoid(f), dc.sigmoid(o), dc.tanh(g)
    cell = f * state.cell + i * g
    hidden = o * dc.tanh(cell)
    return ConvLSTMState(hidden, cell)


class ConvLSTMCell(nn.Module):
    def __init__(self, cin: int, hidden: int, k: int = 3):
        super().__init__()
        self.hidden = hidden
        self.gates = Conv(cin + hidden, 4 * hidden, k)

    def init_state(self, x: Tensor) -> ConvLSTMState:
        b, _, h, w = x.shape
        return ConvLSTMState.zeros(b, self.hidden, h, w, x)

    def forward(self, x: Tensor, state: ConvLSTMState | None = None) -> ConvLSTMState:
        if state is None:
            state = self.init_state(x)
        return conv_lstm_step(state, x, self.gates.weight, self.gates.bias)


class GaussianLSTM(nn.Module):
    """ConvLSTM followed by a conv emitting (mean, log_std) stacked on channels."""

    def __init__(self, cin: int, hidden: int, latent: int):
        super().__init__()
        self.lstm = ConvLSTMCell(cin, hidden)
        self.stats = Conv(hidden, 2 * latent)

    def forward(self, x: Tensor, state: ConvLSTMState | None) -> tuple[Tensor, ConvLSTMState]:
        state = self.lstm(x, state)
        return self.stats(state.hidden), state


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def encoder_resolutions(height: int, width: int, strides: Sequence[int]) -> list[tuple[int, int]]:
    res, h, w = [], height, width
    for s in strides:
        h, w = dc.conv_output_size(h, 3, s, 1), dc.conv_output_size(w, 3, s, 1)
        res.append((h, w))
    return res


class ImageEncoder(nn.Module):
    """Staged conv encoder (VGG-style): each stage is a strided conv plus
    ``convs_per_stage - 1`` stride-1 convs, leaky-ReLU throughout, then a
    projection conv to ``out_channels`` at the bottleneck."""

    def __init__(self, height: int, width: int, channels: Sequence[int], strides: Sequence[int],
                 out_channels: int, convs_per_stage: int = 2, in_channels: int = 3):
        super().__init__()
        if len(channels) != len(strides):
            raise ValueError("channel plan and stride plan lengths differ")
        self.height, self.width = height, width
        self.channels = list(channels)
        self.resolutions = encoder_resolutions(height, width, strides)
        stages, cin = [], in_channels
        for c, s in zip(channels, strides):
            layers = [Conv(cin, c, 3, stride=s)] + [Conv(c, c) for _ in range(convs_per_stage - 1)]
            stages.append(nn.ModuleList(layers))
            cin = c
        self.stages = nn.ModuleList(stages)
        self.project = Conv(cin, out_channels)
        self.out_channels = out_channels

    @property
    def bottleneck(self) -> tuple[int, int]:
        return self.resolutions[-1]

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (self.height, self.width):
            raise dc.DimensionError(
                f"encoder expects [B,3,{self.height},{self.width}] frames, got {tuple(x.shape)}")
        skips = []
        for stage in self.stages:
            for conv in stage:
                x = dc.leaky_relu(conv(x))
            skips.append(x)
        return dc.leaky_relu(self.project(x)), skips


def encode_image(encoder: ImageEncoder, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    return encoder(x)


# ---------------------------------------------------------------------------
# low-resolution heads
# ---------------------------------------------------------------------------

class LowResEncoder(nn.Module):
    """Bottleneck-resolution conv stack with squeeze-excitation gating."""

    def __init__(self, cin: int, mid: int, cout: int):
        super().__init__()
        self.c1, self.c2 = Conv(cin, mid), Conv(mid, mid)
        self.se1 = SqueezeExcite(mid)
        self.c3, self.c4 = Conv(mid, mid), Conv(mid, cout)
        self.se2 = SqueezeExcite(cout)

    def forward(self, x: Tensor) -> Tensor:
        x = dc.leaky_relu(self.c2(dc.leaky_relu(self.c1(x))))
        x = self.se1(x)
        x = dc.leaky_relu(self.c4(dc.leaky_relu(self.c3(x))))
        return self.se2(x)


class Heads(nn.Module):
    """Depth, pose and motion feature heads on top of image features.

    The motion head consumes ``(g_static, e_cur)``; the Combined variant
    passes the previous image feature in the ``g_static`` slot.
    """

    def __init__(self, feat: int, mid: int, depth_ch: int, pose_ch: int, motion_ch: int | None):
        super().__init__()
        self.depth = LowResEncoder(feat, mid, depth_ch)
        self.pose = LowResEncoder(2 * feat, mid, pose_ch)
        self.motion = LowResEncoder(2 * feat, mid, motion_ch) if motion_ch else None

    def depth_features(self, e_cur: Tensor) -> Tensor:
        return self.depth(e_cur)

    def pose_features(self, e_prev: Tensor, e_cur: Tensor) -> Tensor:
        return self.pose(dc.concat([e_prev, e_cur], 1))

    def motion_features(self, g_static: Tensor | None, e_cur: Tensor) -> Tensor:
        if self.motion is None:
            raise ValueError("this model has no motion head")
        if g_static is None:
            raise ValueError("motion head requires the static predictor output g_static")
        return self.motion(dc.concat([g_static, e_cur], 1))

    def forward(self, e_prev: Tensor, e_cur: Tensor, g_static: Tensor | None = None, with_motion: bool = True):
        hd = self.depth_features(e_cur)
        hp = self.pose_features(e_prev, e_cur)
        hf = self.motion_features(g_static, e_cur) if (with_motion and self.motion is not None) else None
        return hd, hp, hf


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------

class SkipDecoder(nn.Module):
    """Upsampling decoder that concatenates encoder skips paired by resolution."""

    def __init__(self, cin: int, skip_channels: Sequence[int], dec_channels: Sequence[int], cout: int,
                 out_size: tuple[int, int]):
        super().__init__()
        if len(skip_channels) != len(dec_channels):
            raise ValueError("one decoder width per skip level required")
        self.out_size = out_size
        # deepest level first
        skip_channels, dec_channels = list(skip_channels)[::-1], list(dec_channels)[::-1]
        self.inp = Conv(cin, dec_channels[0])
        convs, c = [], dec_channels[0]
        for sc, dcn in zip(skip_channels, dec_channels):
            convs.append(Conv(c + sc, dcn))
            c = dcn
        self.convs = nn.ModuleList(convs)
        self.final = ConvT(c, cout, 3, stride=1, padding=1)

    def forward(self, g: Tensor, skips: Sequence[Tensor]) -> Tensor:
        if len(skips) != len(self.convs):
            raise dc.DimensionError(f"decoder expects {len(self.convs)} skips, got {len(skips)}")
        x = dc.leaky_relu(self.inp(g))
        for conv, skip in zip(self.convs, list(skips)[::-1]):
            if x.shape[-2:] != skip.shape[-2:]:
                x = dc.upsample_nearest(x, size=tuple(skip.shape[-2:]))
            x = dc.leaky_relu(conv(dc.concat([x, skip], 1)))
        if tuple(x.shape[-2:]) != tuple(self.out_size):
            x = dc.upsample_nearest(x, size=tuple(self.out_size))
        return self.final(x)


def disparity_to_depth(y: Tensor, d_min: float, d_max: float) -> Tensor:
    """``1 / (a * sigmoid(y) + b)`` mapping onto ``[d_min, d_max]``."""
    a = 1.0 / d_min - 1.0 / d_max
    b = 1.0 / d_max
    return 1.0 / (a * dc.sigmoid(y) + b)


class DepthDecoder(nn.Module):
    def __init__(self, cin, skip_channels, dec_channels, out_size, d_min: float = 0.1, d_max: float = 100.0):
        super().__init__()
        self.net = SkipDecoder(cin, skip_channels, dec_channels, 1, out_size)
        self.d_min, self.d_max = d_min, d_max

    def forward(self, g: Tensor, skips: Sequence[Tensor]) -> Tensor:
        return disparity_to_depth(self.net(g, skips), self.d_min, self.d_max)


def decode_depth(decoder: DepthDecoder, g_s: Tensor, skips: Sequence[Tensor]) -> Tensor:
    return decoder(g_s, skips)


class PoseDecoder(nn.Module):
    """Global average pool, two 1x1 convs, 6-vector scaled down by ``scale``.

    Each rotation component is soft-limited to pi/2 so the axis-angle norm
    stays below pi.
    """

    MAX_ROT = math.pi / 2

    def __init__(self, cin: int, hidden: int, scale: float = 0.01):
        super().__init__()
        self.c1 = Conv(cin, hidden, k=1)
        self.c2 = Conv(hidden, 6, k=1)
        self.scale = scale

    def forward(self, g: Tensor) -> Pose:
        x = dc.leaky_relu(self.c1(dc.global_avg_pool(g)))
        v = self.c2(x)[:, :, 0, 0] * self.scale
        rot = self.MAX_ROT * dc.tanh(v[:, :3] / self.MAX_ROT)
        return Pose(rot, v[:, 3:])


def decode_pose(decoder: PoseDecoder, g_s: Tensor) -> Pose:
    return decoder(g_s)


class FlowMaskDecoder(nn.Module):
    """Residual flow bounded by ``max_flow`` (tanh) and a 1-channel sigmoid mask."""

    def __init__(self, cin, skip_channels, dec_channels, out_size, max_flow: float = 16.0):
        super().__init__()
        self.net = SkipDecoder(cin, skip_channels, dec_channels, 3, out_size)
        self.max_flow = max_flow
        nn.init.zeros_(self.net.final.weight)
        nn.init.zeros_(self.net.final.bias)

    def forward(self, g: Tensor, skips: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
        y = self.net(g, skips)
        return self.max_flow * dc.tanh(y[:, :2]), dc.sigmoid(y[:, 2:3])


def decode_flow_and_mask(decoder: FlowMaskDecoder, g_d: Tensor, skips: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
    return decoder(g_d, skips)
