"""Differentiable tensor substrate.

Tensors are plain ``torch.Tensor`` values and reverse-mode differentiation is
torch autograd. This module adds the pieces the rest of the package relies
on: shape-checked primitives, a catalog of them for verification, a
hand-written Adam update over named parameter sets, a central-difference
gradient checker and the binary checkpoint container.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NumericError(FloatingPointError):
    """Raised when a NaN/Inf shows up where finite values are required."""


class CheckpointError(IOError):
    """Raised for malformed or truncated checkpoint files."""


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_rank(x: Tensor, rank: int, name: str) -> None:
    if x.dim() != rank:
        raise DimensionError(f"{name}: expected rank-{rank} tensor, got shape {tuple(x.shape)}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, ``[B,C,H,W] x [O,C,k,k] -> [B,O,H',W']``."""
    _check_rank(x, 4, "conv2d input")
    _check_rank(kernel, 4, "conv2d kernel")
    k = kernel.shape[-1]
    if kernel.shape[-2] != k:
        raise DimensionError(f"conv2d: non-square kernel {tuple(kernel.shape)}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d: input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv2d: bias shape {tuple(bias.shape)} != ({kernel.shape[0]},)")
    if k < 1 or stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid k={k}, stride={stride}, padding={padding}")
    h, w = x.shape[-2:]
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(f"conv2d: padded input {h}x{w} (p={padding}) smaller than kernel {k}")
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution; kernel layout is ``[C_in, C_out, k, k]``.

    Output size is ``(H - 1) * stride - 2 * padding + k + output_padding``.
    """
    _check_rank(x, 4, "conv_transpose2d input")
    _check_rank(kernel, 4, "conv_transpose2d kernel")
    if x.shape[1] != kernel.shape[0]:
        raise DimensionError(
            f"conv_transpose2d: input has {x.shape[1]} channels but kernel expects {kernel.shape[0]}")
    if bias is not None and bias.shape != (kernel.shape[1],):
        raise DimensionError(f"conv_transpose2d: bias shape {tuple(bias.shape)} != ({kernel.shape[1]},)")
    return F.conv_transpose2d(x, kernel, bias, stride=stride, padding=padding, output_padding=output_padding)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return F.leaky_relu(x, negative_slope=slope)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise DimensionError(f"add: cannot broadcast {tuple(a.shape)} and {tuple(b.shape)}") from exc
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise DimensionError(f"mul: cannot broadcast {tuple(a.shape)} and {tuple(b.shape)}") from exc
    return a * b


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; every other extent must agree."""
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise DimensionError(f"concat: shapes {tuple(ref)} and {tuple(t.shape)} differ off axis {axis}")
    return torch.cat(list(tensors), dim=axis)


def upsample_nearest(x: Tensor, size: tuple[int, int] | None = None, scale: int = 2) -> Tensor:
    _check_rank(x, 4, "upsample_nearest input")
    if size is not None:
        return F.interpolate(x, size=size, mode="nearest")
    return F.interpolate(x, scale_factor=scale, mode="nearest")


def global_avg_pool(x: Tensor) -> Tensor:
    """``[B,C,H,W] -> [B,C,1,1]``."""
    _check_rank(x, 4, "global_avg_pool input")
    return x.mean(dim=(2, 3), keepdim=True)


def squeeze_excite(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Channel gating: ``x * sigmoid(W2 relu(W1 gap(x)))`` with 1x1 convs."""
    s = global_avg_pool(x)
    s = F.relu(conv2d(s, w1, b1))
    gate = torch.sigmoid(conv2d(s, w2, b2))
    if gate.shape[1] != x.shape[1]:
        raise DimensionError(f"squeeze_excite: gate has {gate.shape[1]} channels, input {x.shape[1]}")
    return x * gate


@dataclass(frozen=True)
class Primitive:
    name: str
    fn: Callable[..., Tensor]
    shape_rule: str
    # rng -> (positional tensor inputs, keyword constants)
    sample: Callable[[np.random.Generator], tuple[list[Tensor], dict]]

    def __call__(self, *args, **kwargs) -> Tensor:
        return self.fn(*args, **kwargs)


def _rand(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Tensor:
    return torch.from_numpy(rng.uniform(low, high, size=shape)).to(torch.float64)


def _away_from_zero(rng: np.random.Generator, *shape: int) -> Tensor:
    # keeps FD probes off the leaky-relu kink
    mag = rng.uniform(0.1, 1.0, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return torch.from_numpy(mag * sign)


def _sample_conv(rng):
    b, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = rng.integers(k, k + 4), rng.integers(k, k + 4)
    return [_rand(rng, b, c, h, w), _rand(rng, o, c, k, k), _rand(rng, o)], {"stride": s, "padding": p}


def _sample_convt(rng):
    b, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    h, w = rng.integers(1, 5), rng.integers(1, 5)
    s = int(rng.integers(1, 3))
    p = 0 if k == 1 else int(rng.integers(0, 2))
    return [_rand(rng, b, c, h, w), _rand(rng, c, o, k, k), _rand(rng, o)], {"stride": s, "padding": p}


def _sample_unary(rng):
    return [_away_from_zero(rng, int(rng.integers(1, 3)), int(rng.integers(1, 4)), 3, 4)], {}


def _sample_binary(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), 3, 2)
    return [_rand(rng, *shape), _rand(rng, *shape)], {}


def _sample_concat(rng):
    b, h, w = int(rng.integers(1, 3)), 3, 4
    return [_rand(rng, b, 2, h, w), _rand(rng, b, 3, h, w)], {}


def _sample_se(rng):
    b, c, r = int(rng.integers(1, 3)), 4, 2
    return [_rand(rng, b, c, 3, 4), _rand(rng, r, c, 1, 1), _rand(rng, r),
            _rand(rng, c, r, 1, 1), _rand(rng, c)], {}


def _concat2(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    return concat([a, b], axis=axis)


_PRIMITIVES = {
    p.name: p for p in [
        Primitive("conv2d", conv2d, "[B,C,H,W],[O,C,k,k],[O] -> [B,O,(H+2p-k)//s+1,(W+2p-k)//s+1]", _sample_conv),
        Primitive("conv_transpose2d", conv_transpose2d,
                  "[B,C,H,W],[C,O,k,k],[O] -> [B,O,(H-1)s-2p+k,(W-1)s-2p+k]", _sample_convt),
        Primitive("leaky_relu", leaky_relu, "elementwise, shape preserved", _sample_unary),
        Primitive("sigmoid", sigmoid, "elementwise, shape preserved", _sample_unary),
        Primitive("tanh", tanh, "elementwise, shape preserved", _sample_unary),
        Primitive("add", add, "broadcast(a, b)", _sample_binary),
        Primitive("mul", mul, "broadcast(a, b)", _sample_binary),
        Primitive("concat", _concat2, "[B,C1,H,W],[B,C2,H,W] -> [B,C1+C2,H,W]", _sample_concat),
        Primitive("upsample_nearest", upsample_nearest, "[B,C,H,W] -> [B,C,2H,2W]", _sample_unary),
        Primitive("global_avg_pool", global_avg_pool, "[B,C,H,W] -> [B,C,1,1]", _sample_unary),
        Primitive("squeeze_excite", squeeze_excite, "[B,C,H,W] -> [B,C,H,W] (channel gated)", _sample_se),
    ]
}


def primitive_suite() -> dict[str, Primitive]:
    """Catalog of differentiable primitives used by the networks."""
    return dict(_PRIMITIVES)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParameterSet(Mapping):
    """Ordered, uniquely named collection of parameter tensors."""

    def __init__(self, tensors: Mapping[str, Tensor] | Sequence[tuple[str, Tensor]]):
        items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
        self._tensors: dict[str, Tensor] = {}
        for name, t in items:
            if name in self._tensors:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._tensors[name] = t

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParameterSet":
        return cls(list(module.named_parameters()))

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def grads(self) -> "ParameterSet":
        """Gradient slots, zero-filled where autograd left none."""
        return ParameterSet({
            n: (t.grad.detach() if t.grad is not None else torch.zeros_like(t))
            for n, t in self._tensors.items()
        })

    def numel(self) -> int:
        return sum(t.numel() for t in self._tensors.values())


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], lr: float = 1e-4, **kw) -> "OptimizerState":
        st = cls(lr=lr, **kw)
        for name, p in params.items():
            st.m[name] = torch.zeros_like(p.detach())
            st.v[name] = torch.zeros_like(p.detach())
        return st


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: OptimizerState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"{name}: grad shape {tuple(g.shape)} != param shape {tuple(params[name].shape)}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            if m.shape != p.shape:
                raise DimensionError(f"{name}: accumulator shape {tuple(m.shape)} != {tuple(p.shape)}")
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class NonDeterministicError(RuntimeError):
    pass


def grad_check(f: Callable[[list[Tensor]], Tensor], inputs: Sequence[Tensor],
               epsilon: float | Sequence[float] = 1e-6,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    ``f`` maps the list of inputs to a scalar. The error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``. With ``max_coords`` set, that many
    coordinates per input are drawn at random (seeded) instead of all.

    ``epsilon`` may be a ladder of step sizes; each coordinate then reports
    its smallest error over the ladder (adaptive step selection). Large
    steps resolve tiny gradients above round-off, small steps avoid kinks
    of piecewise-linear ops; an incorrect gradient disagrees at every step.
    """
    steps = [float(epsilon)] if isinstance(epsilon, (int, float)) else [float(e) for e in epsilon]
    if not steps or min(steps) <= 0:
        raise ValueError("epsilon must be positive")
    xs = [x.detach().clone() for x in inputs]
    for i, x in enumerate(xs):
        if x.dtype != torch.float64:
            raise TypeError(f"grad_check input {i} is {x.dtype}; 64-bit precision required")
    with torch.no_grad():
        f0 = f(xs)
        f1 = f(xs)
    if f0.numel() != 1:
        raise DimensionError(f"grad_check: f must return a scalar, got shape {tuple(f0.shape)}")
    if not torch.equal(f0, f1):
        raise NonDeterministicError(
            "f returned different values on identical inputs; fix its random seed before checking")

    leaves = [x.clone().requires_grad_(True) for x in xs]
    out = f(leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(xs, grads):
            g = torch.zeros_like(x) if g is None else g
            flat, gflat = x.view(-1), g.reshape(-1)
            n = flat.numel()
            idx = range(n) if max_coords is None or max_coords >= n else rng.choice(n, max_coords, replace=False)
            for j in idx:
                j = int(j)
                orig = flat[j].item()
                ana = gflat[j].item()
                err = math.inf
                for eps in steps:
                    flat[j] = orig + eps
                    fp = f(xs).item()
                    flat[j] = orig - eps
                    fm = f(xs).item()
                    flat[j] = orig
                    num = (fp - fm) / (2.0 * eps)
                    err = min(err, abs(ana - num) / max(1e-8, abs(ana) + abs(num)))
                if not math.isfinite(err):
                    return math.inf
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SVPCKPT1"


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor], header: Mapping) -> None:
    """Write ``(name, shape, little-endian float32)`` entries after a JSON header.

    Layout: 8-byte magic, uint32 header length, UTF-8 JSON header, then the
    raw entries back to back in header order.
    """
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = dict(header)
    head["entries"] = entries
    blob = json.dumps(head, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    base = 12 + hlen
    tensors = {}
    for e in header.pop("entries"):
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        end = start + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: entry {e['name']!r} truncated")
        arr = np.frombuffer(raw[start:end], dtype="<f4").reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return tensors, header
