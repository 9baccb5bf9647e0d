"""Procedural video datasets and file I/O.

Two generators: `bouncing` (shapes with elastic wall bounces, near-
deterministic dynamics) and `coinflip` (a fixed first frame whose
continuation goes left or right with probability one half, so the expected
second frame has a closed form). Videos are stored in a little-endian
"CMV1" container: magic, u32 N/H/W/C, float32 pixels in [0, 1], row-major.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .rng import RngStream

VIDEO_MAGIC = b"CMV1"


@dataclass
class SyntheticSpec:
    kind: str = "bouncing"  # bouncing | coinflip
    frames: int = 8
    height: int = 32
    width: int = 32
    num_shapes: int = 2
    velocity: float = 2.0  # per-axis speed cap (pixels/frame); coinflip step size
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.kind not in ("bouncing", "coinflip"):
            raise ValueError(f"unknown dataset kind '{self.kind}'")
        if self.frames < 2:
            raise ValueError("need at least 2 frames per clip")
        if self.num_shapes < 1:
            raise ValueError("need at least one shape")
        return self


@dataclass
class Shape:
    form: str  # circle | square
    cy: float
    cx: float
    vy: float
    vx: float
    radius: int
    value: float


def _draw(frame: np.ndarray, shape: Shape) -> None:
    h, w = frame.shape[:2]
    cy, cx, rad = int(round(shape.cy)), int(round(shape.cx)), shape.radius
    yy, xx = np.ogrid[:h, :w]
    if shape.form == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad
    else:
        mask = (np.abs(yy - cy) <= rad) & (np.abs(xx - cx) <= rad)
    frame[..., 0][mask] = np.maximum(frame[..., 0][mask], shape.value)


def render_sequence(shapes: list[Shape], frames: int, height: int, width: int) -> np.ndarray:
    """Roll the shapes forward with elastic wall reflection and rasterize."""
    for s in shapes:
        if 2 * s.radius + 1 > min(height, width):
            raise ValueError(f"shape of radius {s.radius} does not fit a {height}x{width} frame")
    video = np.zeros((frames, height, width, 1), dtype=np.float32)
    state = [Shape(**asdict(s)) for s in shapes]
    for t in range(frames):
        for s in state:
            _draw(video[t], s)
        for s in state:
            s.cy += s.vy
            s.cx += s.vx
            for axis, limit in (("cy", height), ("cx", width)):
                pos = getattr(s, axis)
                lo, hi = s.radius, limit - 1 - s.radius
                if pos < lo:
                    setattr(s, axis, 2 * lo - pos)
                    setattr(s, "v" + axis[-1], -getattr(s, "v" + axis[-1]))
                elif pos > hi:
                    setattr(s, axis, 2 * hi - pos)
                    setattr(s, "v" + axis[-1], -getattr(s, "v" + axis[-1]))
    return video


def gen_bouncing(spec: SyntheticSpec, count: int, seed: int | None = None) -> np.ndarray:
    """Dataset of bouncing-shape clips, [count, N, H, W, 1], deterministic."""
    spec.validate()
    rng = RngStream(spec.seed if seed is None else seed)
    clips = []
    max_radius = (min(spec.height, spec.width) - 2) // 2
    for c in range(count):
        cs = rng.substream("clip", c)
        shapes = []
        for i in range(spec.num_shapes):
            ss = cs.substream("shape", i)
            radius = min(2 + int(ss.integers(0, 2, ())), max_radius)
            cy = float(ss.integers(radius, spec.height - radius, ()))
            cx = float(ss.integers(radius, spec.width - radius, ()))
            vy = float(ss.uniform((), -spec.velocity, spec.velocity))
            vx = float(ss.uniform((), -spec.velocity, spec.velocity))
            form = "circle" if int(ss.integers(0, 2, ())) else "square"
            value = 1.0 - 0.25 * (i % 3)
            shapes.append(Shape(form, cy, cx, vy, vx, radius, value))
        clips.append(render_sequence(shapes, spec.frames, spec.height, spec.width))
    return np.stack(clips)


def _coinflip_shape(spec: SyntheticSpec, offset: float = 0.0) -> Shape:
    radius = max(2, min(spec.height, spec.width) // 8)
    return Shape("square", spec.height / 2, spec.width / 2 + offset, 0.0, 0.0, radius, 1.0)


def _render_coinflip_frame(spec: SyntheticSpec, offset: float) -> np.ndarray:
    frame = np.zeros((spec.height, spec.width, 1), dtype=np.float32)
    _draw(frame, _coinflip_shape(spec, offset))
    return frame


def gen_coinflip(spec: SyntheticSpec, count: int, seed: int | None = None) -> np.ndarray:
    """Clips sharing one first frame; the shape then drifts left or right,
    the direction chosen once per clip with probability 1/2."""
    spec.validate()
    rng = RngStream(spec.seed if seed is None else seed)
    step = max(1.0, spec.velocity)
    half_span = spec.width / 2 - 1
    clips = np.zeros((count, spec.frames, spec.height, spec.width, 1), dtype=np.float32)
    for c in range(count):
        direction = 1.0 if float(rng.substream("dir", c).uniform(())) < 0.5 else -1.0
        for t in range(spec.frames):
            offset = float(np.clip(direction * step * t, -half_span, half_span))
            clips[c, t] = _render_coinflip_frame(spec, offset)
    return clips


def coinflip_outcomes(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(first frame, frame 2 going right, frame 2 going left) in closed form."""
    step = max(1.0, spec.velocity)
    return (_render_coinflip_frame(spec, 0.0),
            _render_coinflip_frame(spec, step),
            _render_coinflip_frame(spec, -step))


def generate_dataset(spec: SyntheticSpec, count: int, seed: int | None = None) -> np.ndarray:
    gen = gen_bouncing if spec.kind == "bouncing" else gen_coinflip
    return gen(spec, count, seed)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_video(path, video: np.ndarray) -> None:
    video = np.ascontiguousarray(video, dtype=np.float32)
    if video.ndim != 4:
        raise ValueError(f"expected [N, H, W, C] video, got shape {video.shape}")
    if not np.isfinite(video).all() or video.min() < 0.0 or video.max() > 1.0:
        raise ValueError("video pixels must be finite and inside [0, 1]")
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<4I", *video.shape))
        fh.write(video.astype("<f4").tobytes(order="C"))


def read_video(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != VIDEO_MAGIC:
            raise ValueError(f"bad video magic {magic!r}")
        dims = struct.unpack("<4I", fh.read(16))
        count = int(np.prod(dims))
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise ValueError("video file is truncated")
        return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def write_dataset(out_dir, spec: SyntheticSpec, count: int, seed: int | None = None) -> dict:
    """Write clips plus a manifest recording the generating spec."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clips = generate_dataset(spec, count, seed)
    files = []
    for i, clip in enumerate(clips):
        name = f"clip_{i:05d}.cmv"
        write_video(out / name, clip)
        files.append(name)
    manifest = {"format": "CMV1", "count": count,
                "seed": spec.seed if seed is None else seed, **asdict(spec), "files": files}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def load_dataset(data_dir) -> tuple[np.ndarray, dict]:
    data = Path(data_dir)
    manifest_path = data / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {data}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    clips = np.stack([read_video(data / name) for name in manifest["files"]])
    return clips, manifest


def write_ppm(path, frame: np.ndarray) -> None:
    """One frame as a binary PPM/PGM image (8-bit)."""
    if frame.ndim != 3 or frame.shape[2] not in (1, 3):
        raise ValueError(f"expected [H, W, 1|3] frame, got {frame.shape}")
    h, w, c = frame.shape
    pixels = np.clip(frame, 0.0, 1.0)
    data = (pixels * 255.0 + 0.5).astype(np.uint8)
    header = f"P5 {w} {h} 255\n" if c == 1 else f"P6 {w} {h} 255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(data.tobytes())
