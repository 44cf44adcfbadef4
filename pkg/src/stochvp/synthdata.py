"""Procedural driving-like sequences with exact ground truth.

The world is a ground plane one unit below the camera and a fronto-parallel
far wall; independently moving fronto-parallel sprites stand on the ground.
Frames are ray cast with 4x4 supersampling; depth, flow, masks and surface
ids are evaluated at pixel centres.

Conventions follow :mod:`stochvp.geometry`: ``poses[k]`` maps camera ``k``
points into camera ``k+1``, and flows are backward sampling offsets on the
target frame, ``x_{k+1}(u) = x_k(u + flow_k(u))``. A sprite moving with
image velocity ``v`` therefore has residual flow ``-v``.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .geometry import Intrinsics, Pose, ego_flow

SCHEMA = "stochvp-synth/v1"
PLANE_MAGIC = b"SVF1"
TRAJECTORIES = ("straight", "turn", "stop_and_go")
GROUND, WALL, SPRITE0 = 0, 1, 2


class GenerationError(ValueError):
    pass


class ObjectOutOfFrustumError(GenerationError):
    pass


class FormatError(IOError):
    pass


class IntegrityError(IOError):
    pass


@dataclass
class ObjectSpec:
    """A fronto-parallel sprite standing at world depth ``depth``.

    ``vx``/``vy`` are world units per frame. With ``persistence < 1`` the
    horizontal velocity is redrawn from ``{-speed, 0, speed}`` at each frame
    with probability ``1 - persistence``.
    """
    width: float = 1.0
    height: float = 1.0
    depth: float = 5.0
    x: float = 0.0
    bottom: float | None = None
    vx: float = 0.0
    vy: float = 0.0
    speed: float = 0.0
    persistence: float = 1.0
    appearance_seed: int = 0


@dataclass
class SceneSpec:
    seed: int = 0
    n_frames: int = 10
    height: int = 32
    width: int = 64
    intrinsics: tuple[float, float, float, float] | None = None
    trajectory: str = "straight"
    speed: float = 0.15
    direction: tuple[float, float, float] = (0.0, 0.0, 1.0)
    turn_rate: float = 0.01
    stop_period: int = 6
    texture_freq: float = 1.0
    camera_height: float = 1.0
    wall_distance: float = 12.0
    objects: list[ObjectSpec] = field(default_factory=list)
    supersample: int = 4
    max_flow: float = 16.0

    def __post_init__(self):
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        if self.intrinsics is not None:
            self.intrinsics = tuple(float(v) for v in self.intrinsics)
        self.direction = tuple(float(v) for v in self.direction)

    def K(self) -> Intrinsics:
        if self.intrinsics is None:
            return Intrinsics.centered(self.height, self.width)
        return Intrinsics(*self.intrinsics)

    def validate(self) -> None:
        if self.trajectory not in TRAJECTORIES:
            raise GenerationError(f"unknown trajectory {self.trajectory!r}; expected one of {TRAJECTORIES}")
        if self.n_frames < 2:
            raise GenerationError("n_frames must be >= 2")
        if self.height < 4 or self.width < 4:
            raise GenerationError("resolution too small")
        if self.supersample < 1:
            raise GenerationError("supersample must be >= 1")
        if self.wall_distance <= 0 or self.camera_height <= 0:
            raise GenerationError("wall_distance and camera_height must be positive")
        if np.linalg.norm(self.direction) == 0:
            raise GenerationError("direction must be non-zero")
        for i, o in enumerate(self.objects):
            if o.width <= 0 or o.height <= 0 or o.depth <= 0:
                raise GenerationError(f"object {i}: width, height and depth must be positive")
            if not 0.0 <= o.persistence <= 1.0:
                raise GenerationError(f"object {i}: persistence must lie in [0, 1]")
        self.K().validate(self.height, self.width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["direction"] = list(self.direction)
        if self.intrinsics is not None:
            d["intrinsics"] = list(self.intrinsics)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise GenerationError(f"unknown scene fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class SequenceBatch:
    """Ground truth for one sequence (numpy, float32).

    ``frames`` [T,3,H,W], ``depths`` [T,1,H,W], ``poses`` [T-1,6],
    ``residual_flows``/``total_flows`` [T-1,2,H,W], ``fg_masks`` [T,1,H,W],
    ``surface_ids`` [T,1,H,W] (uint8), ``visibility`` [T-1,1,H,W].
    Optional channels may be ``None``; ``extras`` holds additional float
    arrays (e.g. predicted auxiliaries in rollout dumps).
    """
    frames: np.ndarray
    intrinsics: Intrinsics
    depths: np.ndarray | None = None
    poses: np.ndarray | None = None
    residual_flows: np.ndarray | None = None
    total_flows: np.ndarray | None = None
    fg_masks: np.ndarray | None = None
    surface_ids: np.ndarray | None = None
    visibility: np.ndarray | None = None
    spec: dict | None = None
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def frames_torch(self) -> torch.Tensor:
        return torch.from_numpy(self.frames)


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------

def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B1)) ^ (iy.astype(np.uint64) * np.uint64(0x85EBCA77))
    h ^= np.uint64((seed * 0xC2B2AE3D) & 0xFFFFFFFFFFFFFFFF)
    h ^= h >> np.uint64(15)
    h *= np.uint64(0x2C1B3C6D)
    h ^= h >> np.uint64(12)
    h *= np.uint64(0x297A2D39)
    h ^= h >> np.uint64(15)
    return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(0xFFFFFF)


def value_noise(u: np.ndarray, v: np.ndarray, seed: int, octaves: int = 2) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1], band-limited by construction."""
    total = np.zeros_like(u)
    norm = 0.0
    for o in range(octaves):
        f, a = 2.0 ** o, 0.5 ** o
        x, y = u * f, v * f
        x0, y0 = np.floor(x), np.floor(y)
        fx, fy = x - x0, y - y0
        sx, sy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
        ix, iy = x0.astype(np.int64), y0.astype(np.int64)
        s = seed * 31 + o
        n00, n10 = _hash01(ix, iy, s), _hash01(ix + 1, iy, s)
        n01, n11 = _hash01(ix, iy + 1, s), _hash01(ix + 1, iy + 1, s)
        total += a * ((n00 * (1 - sx) + n10 * sx) * (1 - sy) + (n01 * (1 - sx) + n11 * sx) * sy)
        norm += a
    return total / norm


def _palette(seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 99])
    a = rng.uniform(0.1, 0.5, 3)
    b = rng.uniform(0.5, 0.9, 3)
    return a, b


# ---------------------------------------------------------------------------
# camera and objects over time
# ---------------------------------------------------------------------------

def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def camera_trajectory(spec: SceneSpec) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """World-from-camera rotations and camera centres for every frame."""
    rng = np.random.default_rng([spec.seed, 1])
    phase = int(rng.integers(0, max(1, spec.stop_period)))
    d = np.asarray(spec.direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    yaw, c = 0.0, np.zeros(3)
    rots, centres = [], []
    for t in range(spec.n_frames):
        rots.append(_rot_y(yaw))
        centres.append(c.copy())
        speed, rate = spec.speed, 0.0
        if spec.trajectory == "turn":
            rate = spec.turn_rate
        elif spec.trajectory == "stop_and_go":
            speed = spec.speed if ((t + phase) // spec.stop_period) % 2 == 0 else 0.0
        c = c + speed * (_rot_y(yaw + 0.5 * rate) @ d)
        yaw += rate
    return rots, centres


def object_tracks(spec: SceneSpec) -> list[np.ndarray]:
    """Per-object ``[T,3]`` world centres of the sprite's bottom edge."""
    tracks = []
    for i, o in enumerate(spec.objects):
        rng = np.random.default_rng([spec.seed, 1000 + i])
        bottom = spec.camera_height if o.bottom is None else o.bottom
        p = np.array([o.x, bottom, o.depth], dtype=np.float64)
        vx = o.vx
        pts = []
        for t in range(spec.n_frames):
            pts.append(p.copy())
            if t > 0 and o.persistence < 1.0 and rng.random() > o.persistence:
                vx = float(rng.choice([-o.speed, 0.0, o.speed]))
            p = p + np.array([vx, o.vy, 0.0])
        tracks.append(np.stack(pts))
    return tracks


def relative_pose(r_prev: np.ndarray, c_prev: np.ndarray, r_cur: np.ndarray, c_cur: np.ndarray) -> np.ndarray:
    """(rx, ry, rz, tx, ty, tz) mapping previous-camera points to the current camera."""
    r = r_cur.T @ r_prev
    t = r_cur.T @ (c_prev - c_cur)
    angle = math.acos(max(-1.0, min(1.0, (np.trace(r) - 1) / 2)))
    if angle < 1e-12:
        w = np.zeros(3)
    else:
        w = angle / (2 * math.sin(angle)) * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return np.concatenate([w, t])


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

def _cast(spec: SceneSpec, K: Intrinsics, rot: np.ndarray, centre: np.ndarray, obj_pos: Sequence[np.ndarray],
          u: np.ndarray, v: np.ndarray):
    """Nearest hit for pixel coordinates ``u, v``: (depth, surface id, world point)."""
    dc = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], -1)
    dw = dc @ rot.T
    inf = np.full(u.shape, np.inf)
    depth = inf.copy()
    ids = np.full(u.shape, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dw[..., 1] > 1e-12, (spec.camera_height - centre[1]) / dw[..., 1], np.inf)
        tw = np.where(dw[..., 2] > 1e-12, (spec.wall_distance - centre[2]) / dw[..., 2], np.inf)
        tw = np.where(tw > 0, tw, np.inf)
        for t_hit, sid in ((tg, GROUND), (tw, WALL)):
            closer = t_hit < depth
            depth = np.where(closer, t_hit, depth)
            ids = np.where(closer, sid, ids)
        for k, (o, p) in enumerate(zip(spec.objects, obj_pos)):
            to = np.where(dw[..., 2] > 1e-12, (p[2] - centre[2]) / dw[..., 2], np.inf)
            hx = centre[0] + to * dw[..., 0]
            hy = centre[1] + to * dw[..., 1]
            inside = (to > 0) & (np.abs(hx - p[0]) <= o.width / 2) & (hy <= p[1]) & (hy >= p[1] - o.height)
            closer = inside & (to < depth)
            depth = np.where(closer, to, depth)
            ids = np.where(closer, SPRITE0 + k, ids)
    if np.any(ids < 0):
        raise GenerationError("ray missed every surface; check wall distance and field of view")
    world = centre + depth[..., None] * dw
    return depth, ids, world


def _shade(spec: SceneSpec, ids: np.ndarray, world: np.ndarray, obj_pos: Sequence[np.ndarray]) -> np.ndarray:
    out = np.zeros(ids.shape + (3,))
    f = spec.texture_freq
    surfaces = [(GROUND, world[..., 0], world[..., 2], f, spec.seed * 7 + 1),
                (WALL, world[..., 0], world[..., 1], f * 2.5 / spec.wall_distance, spec.seed * 7 + 2)]
    for k, (o, p) in enumerate(zip(spec.objects, obj_pos)):
        fs = 2.5 / max(o.width, o.height)
        surfaces.append((SPRITE0 + k, world[..., 0] - p[0], world[..., 1] - p[1], fs, o.appearance_seed * 13 + 5))
    for sid, a, b, freq, seed in surfaces:
        sel = ids == sid
        if not sel.any():
            continue
        n = value_noise(a[sel] * freq, b[sel] * freq, seed)
        ca, cb = _palette(seed)
        out[sel] = ca + (cb - ca) * n[:, None]
    return out


def quantize(x: np.ndarray) -> np.ndarray:
    """Round to the 8-bit lattice so frames survive PPM round trips bit-exactly."""
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _project(K: Intrinsics, rot: np.ndarray, centre: np.ndarray, world: np.ndarray) -> np.ndarray:
    pc = (world - centre) @ rot
    return np.stack([K.fx * pc[..., 0] / pc[..., 2] + K.cx, K.fy * pc[..., 1] / pc[..., 2] + K.cy], 0)


def _check_objects(spec: SceneSpec, K: Intrinsics, rots, centres, tracks) -> None:
    for k, (o, tr) in enumerate(zip(spec.objects, tracks)):
        for t in range(spec.n_frames):
            p = tr[t]
            corners = np.array([[p[0] + sx * o.width / 2, p[1] - sy * o.height, p[2]]
                                for sx in (-1, 1) for sy in (0, 1)])
            pc = (corners - centres[t]) @ rots[t]
            if np.any(pc[:, 2] < 0.5):
                raise ObjectOutOfFrustumError(f"object {k} passes behind the camera at frame {t}")
            px = K.fx * pc[:, 0] / pc[:, 2] + K.cx
            py = K.fy * pc[:, 1] / pc[:, 2] + K.cy
            if px.min() < 0 or px.max() > spec.width - 1 or py.min() < 0 or py.max() > spec.height - 1:
                raise ObjectOutOfFrustumError(f"object {k} leaves the frustum at frame {t}")
            if p[2] >= spec.wall_distance:
                raise GenerationError(f"object {k} lies behind the far wall")


def generate(spec: SceneSpec) -> SequenceBatch:
    spec.validate()
    K = spec.K()
    T, H, W, S = spec.n_frames, spec.height, spec.width, spec.supersample
    rots, centres = camera_trajectory(spec)
    tracks = object_tracks(spec)
    _check_objects(spec, K, rots, centres, tracks)

    vv, uu = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    offs = (np.arange(S) + 0.5) / S - 0.5
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    su = uu[..., None] + ox.reshape(-1)
    sv = vv[..., None] + oy.reshape(-1)

    frames = np.zeros((T, 3, H, W), np.float32)
    depths = np.zeros((T, 1, H, W), np.float32)
    ids = np.zeros((T, 1, H, W), np.uint8)
    worlds = []
    for t in range(T):
        pos = [tr[t] for tr in tracks]
        d_ss, id_ss, w_ss = _cast(spec, K, rots[t], centres[t], pos, su, sv)
        frames[t] = quantize(_shade(spec, id_ss, w_ss, pos).mean(2)).transpose(2, 0, 1)
        d, i, w = _cast(spec, K, rots[t], centres[t], pos, uu, vv)
        depths[t, 0] = d
        ids[t, 0] = i
        worlds.append(w)
    fg = (ids >= SPRITE0).astype(np.float32)

    poses = np.stack([relative_pose(rots[t], centres[t], rots[t + 1], centres[t + 1]) for t in range(T - 1)])
    poses = poses.astype(np.float32)
    ego = ego_flow(torch.from_numpy(depths[1:]), Pose.from_vector(torch.from_numpy(poses)), K).numpy()
    residual = np.zeros_like(ego)
    visibility = np.zeros((T - 1, 1, H, W), np.float32)
    pix = np.stack([uu, vv], 0)
    for t in range(1, T):
        world = worlds[t].copy()
        sid = ids[t, 0].astype(np.int64)
        for k in range(len(spec.objects)):
            sel = sid == SPRITE0 + k
            world[sel] -= tracks[k][t] - tracks[k][t - 1]
        src = _project(K, rots[t - 1], centres[t - 1], world)
        res = (src - pix).astype(np.float32) - ego[t - 1]
        residual[t - 1] = np.where(sid >= SPRITE0, res, 0.0)
        visibility[t - 1, 0] = _visible(src, sid, ids[t - 1, 0].astype(np.int64))
    total = ego + residual
    if not np.all(np.isfinite(total)) or np.abs(total).max() >= spec.max_flow:
        raise GenerationError(f"flow magnitude {np.abs(total).max():.2f} exceeds max_flow {spec.max_flow}")
    return SequenceBatch(frames=frames, intrinsics=K, depths=depths, poses=poses, residual_flows=residual,
                         total_flows=total, fg_masks=fg, surface_ids=ids, visibility=visibility,
                         spec=spec.to_dict())


def _visible(src: np.ndarray, sid_cur: np.ndarray, sid_prev: np.ndarray) -> np.ndarray:
    """Surface-id buffer test: all four bilinear taps in the previous frame
    must see the same surface as the target pixel."""
    h, w = sid_cur.shape
    x, y = src
    ok = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x0 = np.clip(np.floor(x), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, h - 1).astype(np.int64)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        ok &= sid_prev[yy, xx] == sid_cur
    return ok.astype(np.float32)


def sample_scene_spec(seed: int, n_frames: int = 10, height: int = 32, width: int = 64,
                      n_objects: tuple[int, int] = (1, 2), trajectories: Sequence[str] = TRAJECTORIES,
                      persistence: float = 0.7, object_speed: float = 0.12, camera_speed: float = 0.12,
                      depth_range: tuple[float, float] = (4.0, 7.0), max_tries: int = 50) -> SceneSpec:
    """Random scene whose sprites stay inside the frustum (rejection sampling)."""
    for attempt in range(max_tries):
        rng = np.random.default_rng([seed, attempt])
        objs = []
        for k in range(int(rng.integers(n_objects[0], n_objects[1] + 1))):
            depth = float(rng.uniform(*depth_range))
            objs.append(ObjectSpec(width=float(rng.uniform(0.8, 1.5)), height=float(rng.uniform(0.7, 1.3)),
                                   depth=depth, x=float(rng.uniform(-0.5, 0.5) * depth * 0.8),
                                   vx=float(rng.choice([-object_speed, 0.0, object_speed])),
                                   speed=object_speed, persistence=persistence,
                                   appearance_seed=int(rng.integers(0, 2 ** 31))))
        spec = SceneSpec(seed=int(rng.integers(0, 2 ** 31)), n_frames=n_frames, height=height, width=width,
                         trajectory=str(rng.choice(list(trajectories))),
                         speed=float(camera_speed * rng.uniform(0.7, 1.3)),
                         turn_rate=float(rng.uniform(-0.01, 0.01)), texture_freq=float(rng.uniform(0.8, 1.2)),
                         objects=objs)
        try:
            spec.validate()
            _check_objects(spec, spec.K(), *camera_trajectory(spec), object_tracks(spec))
            return spec
        except ObjectOutOfFrustumError:
            continue
    raise GenerationError(f"no valid scene after {max_tries} attempts for seed {seed}")


def gt_reconstruction(batch: SequenceBatch, t: int) -> np.ndarray:
    """Frame ``t`` rebuilt from frame ``t-1`` by the GT ego warp plus residual flow."""
    from .geometry import flow_warp
    prev = torch.from_numpy(batch.frames[t - 1:t])
    total = torch.from_numpy(batch.total_flows[t - 1:t])
    return flow_warp(prev, total).numpy()[0]


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def _write_ppm(path: Path, img: np.ndarray) -> bytes:
    """``img`` [3,H,W] in [0,1]."""
    h, w = img.shape[1:]
    data = b"P6\n%d %d\n255\n" % (w, h) + np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8).tobytes()
    path.write_bytes(data)
    return data


def _write_pgm(path: Path, img: np.ndarray) -> bytes:
    h, w = img.shape
    data = b"P5\n%d %d\n255\n" % (w, h) + img.astype(np.uint8).tobytes()
    path.write_bytes(data)
    return data


def _read_pnm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    data = _read(path)
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != magic or parts[3] != b"255":
        raise FormatError(f"{path.name}: not an 8-bit {magic.decode()} image")
    w, h = int(parts[1]), int(parts[2])
    body = parts[4]
    if len(body) != w * h * channels:
        raise IntegrityError(f"{path.name}: expected {w * h * channels} bytes of pixels, got {len(body)}")
    arr = np.frombuffer(body, np.uint8).reshape(h, w, channels)
    return arr.transpose(2, 0, 1)


def _plane_bytes(arr: np.ndarray) -> bytes:
    c, h, w = arr.shape
    return PLANE_MAGIC + struct.pack("<III", c, h, w) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _read_plane(path: Path) -> np.ndarray:
    data = _read(path)
    if len(data) < 16:
        raise IntegrityError(f"{path.name}: truncated header")
    if data[:4] != PLANE_MAGIC:
        raise FormatError(f"{path.name}: bad magic {data[:4]!r}")
    c, h, w = struct.unpack("<III", data[4:16])
    if len(data) - 16 != 4 * c * h * w:
        raise IntegrityError(f"{path.name}: expected {4 * c * h * w} payload bytes, got {len(data) - 16}")
    return np.frombuffer(data[16:], "<f4").reshape(c, h, w).astype(np.float32)


def _read(path: Path) -> bytes:
    if not path.exists():
        raise IntegrityError(f"missing file {path.name} in {path.parent}")
    return path.read_bytes()


_STACKS = {"depths": "depth", "residual_flows": "resflow", "total_flows": "flow", "visibility": "vis"}


def write_sequence(batch: SequenceBatch, path: str | os.PathLike) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}

    def put(name: str, data: bytes):
        (d / name).write_bytes(data)
        files[name] = hashlib.sha256(data).hexdigest()

    for t, f in enumerate(batch.frames):
        files[f"frame_{t:03d}.ppm"] = hashlib.sha256(_write_ppm(d / f"frame_{t:03d}.ppm", f)).hexdigest()
    if batch.fg_masks is not None:
        for t, m in enumerate(batch.fg_masks):
            files[f"mask_{t:03d}.pgm"] = hashlib.sha256(_write_pgm(d / f"mask_{t:03d}.pgm", m[0] * 255)).hexdigest()
    if batch.surface_ids is not None:
        for t, s in enumerate(batch.surface_ids):
            files[f"surf_{t:03d}.pgm"] = hashlib.sha256(_write_pgm(d / f"surf_{t:03d}.pgm", s[0])).hexdigest()
    channels = {}
    for attr, stem in _STACKS.items():
        arr = getattr(batch, attr)
        if arr is None:
            continue
        channels[attr] = len(arr)
        for t, plane in enumerate(arr):
            put(f"{stem}_{t:03d}.f32", _plane_bytes(plane))
    extras = {}
    for name, arr in batch.extras.items():
        arr = np.asarray(arr, np.float32)
        extras[name] = list(arr.shape)
        put(f"extra_{name}.f32", _plane_bytes(arr.reshape(-1, *arr.shape[-2:])))
    t, _, h, w = batch.frames.shape
    manifest = {
        "schema": SCHEMA, "n_frames": t, "height": h, "width": w,
        "intrinsics": batch.intrinsics.as_list(),
        "poses": None if batch.poses is None else [[float(x) for x in p] for p in batch.poses],
        "channels": channels, "has_masks": batch.fg_masks is not None,
        "has_surface_ids": batch.surface_ids is not None, "extras": extras,
        "spec": batch.spec, "files": dict(sorted(files.items())),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_sequence(path: str | os.PathLike, verify_checksums: bool = True) -> SequenceBatch:
    d = Path(path)
    mf = d / "manifest.json"
    if not mf.exists():
        raise IntegrityError(f"no manifest.json in {d}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mf}: {exc}") from exc
    if manifest.get("schema") != SCHEMA:
        raise FormatError(f"{d}: schema {manifest.get('schema')!r} is not {SCHEMA!r}")
    t = manifest["n_frames"]
    if verify_checksums:
        for name, digest in manifest["files"].items():
            if hashlib.sha256(_read(d / name)).hexdigest() != digest:
                raise IntegrityError(f"{d / name}: checksum mismatch")
    frames = np.stack([_read_pnm(d / f"frame_{i:03d}.ppm", b"P6", 3) for i in range(t)]).astype(np.float32) / 255
    batch = SequenceBatch(frames=frames.astype(np.float32), intrinsics=Intrinsics(*manifest["intrinsics"]),
                          spec=manifest.get("spec"))
    if manifest.get("poses") is not None:
        batch.poses = np.asarray(manifest["poses"], np.float32).reshape(-1, 6)
    if manifest.get("has_masks"):
        batch.fg_masks = (np.stack([_read_pnm(d / f"mask_{i:03d}.pgm", b"P5", 1) for i in range(t)]) > 127)
        batch.fg_masks = batch.fg_masks.astype(np.float32)
    if manifest.get("has_surface_ids"):
        batch.surface_ids = np.stack([_read_pnm(d / f"surf_{i:03d}.pgm", b"P5", 1) for i in range(t)])
    for attr, n in manifest.get("channels", {}).items():
        setattr(batch, attr, np.stack([_read_plane(d / f"{_STACKS[attr]}_{i:03d}.f32") for i in range(n)]))
    for name, shape in manifest.get("extras", {}).items():
        batch.extras[name] = _read_plane(d / f"extra_{name}.f32").reshape(shape)
    return batch


def write_dataset(batches: Sequence[SequenceBatch], root: str | os.PathLike, meta: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for i, b in enumerate(batches):
        name = f"seq_{i:04d}"
        write_sequence(b, root / name)
        names.append(name)
    index = {"schema": SCHEMA, "sequences": names, **(meta or {})}
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))


def read_dataset(root: str | os.PathLike, verify_checksums: bool = True) -> list[SequenceBatch]:
    root = Path(root)
    idx = root / "index.json"
    if not idx.exists():
        if (root / "manifest.json").exists():
            return [read_sequence(root, verify_checksums)]
        raise IntegrityError(f"{root}: neither index.json nor manifest.json present")
    index = json.loads(idx.read_text())
    if index.get("schema") != SCHEMA:
        raise FormatError(f"{root}: schema {index.get('schema')!r} is not {SCHEMA!r}")
    return [read_sequence(root / n, verify_checksums) for n in index["sequences"]]


def stack_frames(batches: Sequence[SequenceBatch]) -> torch.Tensor:
    """``[N,T,3,H,W]`` training tensor; sequences are cropped to the shortest."""
    t = min(b.n_frames for b in batches)
    return torch.from_numpy(np.stack([b.frames[:t] for b in batches]))
