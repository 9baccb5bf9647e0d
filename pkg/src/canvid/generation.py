"""Inference: masking schedules, canvas-initialized masked decoding with
compositional guidance over the flow head, noise augmentation of
autoregressive inputs, and multi-frame rollout with KV caching."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor
from .blocks import TokenGrid, patchify_array, unpatchify_array
from .model import CanvasEmbedding, TemporalEmbedding, VideoModel
from .rng import RngStream

# decoding-step / guidance presets that reproduce the reference operating
# points for the two published model sizes
GUIDANCE_PRESETS = {
    "steps6": {"decode_steps": 6, "ws": 2.5, "wt": 1.1},
    "steps12": {"decode_steps": 12, "ws": 2.25, "wt": 1.0},
}


@dataclass(frozen=True)
class GuidanceScales:
    """Spatial (canvas) and temporal guidance weights; (1, 1) is the plain
    conditional model."""

    ws: float = 1.0
    wt: float = 1.0

    def __post_init__(self):
        if self.ws < 0 or self.wt < 0:
            raise ValueError(f"guidance scales must be >= 0, got ({self.ws}, {self.wt})")

    @property
    def is_plain(self) -> bool:
        return self.ws == 1.0 and self.wt == 1.0


@dataclass(frozen=True)
class AugmentConfig:
    """Noise-interpolation coefficients for the previous frame (r) and the
    canvas embedding (r_prime). Training samples both from U(0, 0.8);
    inference pins them inside [0.3, 0.6]."""

    r: float = 0.4
    r_prime: float = 0.4
    mode: str = "inference"

    TRAIN_HIGH = 0.8
    INFERENCE_BAND = (0.3, 0.6)

    def __post_init__(self):
        if self.mode not in ("inference", "train"):
            raise ValueError(f"unknown augment mode '{self.mode}'")
        if self.mode == "inference":
            lo, hi = self.INFERENCE_BAND
            for name, val in (("r", self.r), ("r_prime", self.r_prime)):
                if not lo <= val <= hi:
                    raise ValueError(f"inference {name}={val} outside [{lo}, {hi}]")


@lru_cache(maxsize=4096)
def _cos_table(k: int) -> np.ndarray:
    t = np.cos(np.pi * np.arange(k + 1) / (2.0 * k))
    t[0], t[-1] = 1.0, 0.0  # exact endpoints; float cos(pi/2) is not 0
    t.setflags(write=False)
    return t


def _repair_sizes(sizes: np.ndarray) -> np.ndarray:
    """Raise zero-size reveal sets to one token, paid for by the largest sets."""
    deficit = int((sizes == 0).sum())
    sizes = np.maximum(sizes, 1)
    if deficit == 0:
        return sizes
    # waterline: cap the largest buckets at the smallest level whose total
    # surplus covers the deficit, then drop `rem` of the capped buckets one more
    counts = np.bincount(sizes)
    levels = np.arange(counts.size)
    above = np.cumsum((counts * levels)[::-1])[::-1]  # sum of sizes >= L
    tally = np.cumsum(counts[::-1])[::-1]             # count of sizes >= L
    surplus = above - levels * tally                  # total removable by capping at L
    level = int(np.searchsorted(-surplus, -deficit))  # smallest L with surplus <= deficit
    rem = deficit - int(surplus[level])
    capped = np.minimum(sizes, level)
    if rem:
        at_level = np.flatnonzero(sizes >= level)[:rem]
        capped[at_level] -= 1
    return capped


def cosine_set_sizes(n: int, num_steps: int) -> np.ndarray:
    """Reveal-set sizes for masked decoding under a cosine masked-count curve.

    The masked count after step k is ceil(n * cos(pi*k/(2K))), which starts
    at n and ends at 0; sizes are its decrements. A repair pass guarantees
    every step reveals at least one token while keeping the total at n, so
    the masked-count curve is strictly decreasing.
    """
    if not 1 <= num_steps <= n:
        raise ValueError(f"need 1 <= num_steps <= n, got K={num_steps}, n={n}")
    masked = np.ceil(n * _cos_table(num_steps)).astype(np.int64)
    sizes = masked[:-1] - masked[1:]
    if sizes.min() < 1:
        sizes = _repair_sizes(sizes)
    return sizes


def _repair_rows(sizes: np.ndarray, deficits: np.ndarray) -> np.ndarray:
    """Vectorized waterline repair over many schedules at once.

    `sizes` is [R, K] with zero entries already raised to one and `deficits`
    the per-row count of raised entries; rows are repaired exactly like
    `_repair_sizes` does one at a time.
    """
    rows, _ = sizes.shape
    top = int(sizes.max()) + 1
    flat = (sizes + (np.arange(rows, dtype=sizes.dtype) * top)[:, None]).ravel()
    counts = np.bincount(flat, minlength=rows * top).reshape(rows, top)
    levels = np.arange(top, dtype=np.int64)
    above = (counts * levels)[:, ::-1].cumsum(axis=1)[:, ::-1]
    tally = counts[:, ::-1].cumsum(axis=1)[:, ::-1]
    surplus = above - levels * tally
    level = (surplus > deficits[:, None]).sum(axis=1)
    rem = deficits - surplus[np.arange(rows), level]
    capped = np.minimum(sizes, level[:, None].astype(sizes.dtype))
    at_level = sizes >= level[:, None]
    rank = np.cumsum(at_level, axis=1)
    capped -= (at_level & (rank <= rem[:, None])).astype(sizes.dtype)
    return capped


def schedule_sizes_bulk(num_steps: int, max_n: int) -> tuple[np.ndarray, np.ndarray]:
    """cosine_set_sizes for every n in [num_steps, max_n] at once.

    Returns (n values, sizes matrix [R, K]); row r equals
    cosine_set_sizes(n_values[r], num_steps).
    """
    ns = np.arange(num_steps, max_n + 1, dtype=np.int64)
    masked = np.ceil(ns[:, None] * _cos_table(num_steps))
    sizes = (masked[:, :-1] - masked[:, 1:]).astype(np.int32)
    deficits = (sizes == 0).sum(axis=1).astype(np.int64)
    bad = deficits > 0
    if bad.any():
        sizes[bad] = _repair_rows(np.maximum(sizes[bad], 1), deficits[bad])
    return ns, sizes


def sample_permutation(n: int, rng: RngStream) -> np.ndarray:
    """Uniform random generation order over token slots (Fisher-Yates)."""
    if n < 1:
        raise ValueError("permutation needs n >= 1")
    return rng.permutation(n)


@dataclass
class MaskPlan:
    """A decoding plan: token order plus reveal-set sizes per step."""

    perm: np.ndarray
    sizes: np.ndarray

    def __post_init__(self):
        n = self.perm.size
        if not np.array_equal(np.sort(self.perm), np.arange(n)):
            raise ValueError("perm must be a permutation of range(n)")
        if self.sizes.sum() != n or (self.sizes < 1).any():
            raise ValueError("set sizes must be >= 1 and sum to n")

    @property
    def cumulative(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @classmethod
    def sample(cls, n: int, num_steps: int, rng: RngStream) -> "MaskPlan":
        return cls(sample_permutation(n, rng), cosine_set_sizes(n, num_steps))


def augment(x, r: float, rng: RngStream):
    """Interpolate toward Gaussian noise: x*(1-r) + eps*r.

    Accepts arrays or Tensors; the Tensor path keeps gradients flowing
    through x while the noise stays constant.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"augmentation coefficient must be in [0, 1], got {r}")
    if isinstance(x, Tensor):
        eps = rng.gaussian(x.shape, dtype=np.float32)
        return x * (1.0 - r) + Tensor(eps * r)
    x = np.asarray(x)
    eps = rng.gaussian(x.shape, dtype=x.dtype if x.dtype == np.float64 else np.float32)
    return x * (1.0 - r) + eps * r


def cfg_velocity(v_uncond, v_temporal, v_full, scales: GuidanceScales):
    """Compositional guidance combination of the three velocity branches.

    The reductions (1,1) -> v_full, (0,1) -> v_temporal and (0,0) -> v_uncond
    are returned exactly (same object), not via float arithmetic.
    """
    shapes = {np.shape(v.data if isinstance(v, Tensor) else v)
              for v in (v_uncond, v_temporal, v_full)}
    if len(shapes) != 1:
        raise ValueError(f"velocity branches disagree in shape: {shapes}")
    if scales.ws == 1.0 and scales.wt == 1.0:
        return v_full
    if scales.ws == 0.0 and scales.wt == 1.0:
        return v_temporal
    if scales.ws == 0.0 and scales.wt == 0.0:
        return v_uncond
    return v_uncond + scales.wt * (v_temporal - v_uncond) + scales.ws * (v_full - v_temporal)


def _decode_frames(model: VideoModel, zt_rows: np.ndarray, canvas_rows: np.ndarray | None,
                   decode_steps: int, scales: GuidanceScales,
                   frame_streams: list[RngStream], *, flow_steps: int | None = None,
                   force_all_branches: bool = False) -> np.ndarray:
    """Masked decode of a batch of frames (no gradients).

    zt_rows [B, n, d] conditions every frame; canvas_rows [B, n, d] or None
    seeds the masked slots. One stream per frame drives its plan and noise;
    flow noise is drawn as one [n, d_tok] block per frame, row j belonging to
    token j, so draws do not depend on the decoding order.
    """
    cfg = model.cfg
    batch, n = zt_rows.shape[0], cfg.n_tokens
    steps = cfg.flow_steps if flow_steps is None else flow_steps
    plans = [MaskPlan.sample(n, decode_steps, fs.substream("plan")) for fs in frame_streams]
    perms = np.stack([p.perm for p in plans]).astype(np.int64)
    sizes = plans[0].sizes
    x0 = np.stack([fs.substream("flow").gaussian((n, cfg.token_dim)) for fs in frame_streams])

    out = np.zeros((batch, n, cfg.token_dim), dtype=np.float32)
    masked = np.ones((batch, n, 1), dtype=np.float32)
    zt_t = Tensor(zt_rows)
    need_aux = force_all_branches or not scales.is_plain
    mask_rows = model.spatial.mask_rows((batch,)) if (need_aux or canvas_rows is None) else None
    zt_uncond = model.uncond_temporal_rows((batch,)) if need_aux else None

    start = 0
    for size in sizes:
        idx = perms[:, start:start + size]
        cond_full = Tensor(canvas_rows) if canvas_rows is not None else mask_rows
        z_full = model.spatial.forward_rows(out, masked, cond_full, zt_t).data
        z_set = np.take_along_axis(z_full, idx[:, :, None], axis=1)
        if need_aux:
            z_temporal = model.spatial.forward_rows(out, masked, mask_rows, zt_t).data
            z_uncond = model.spatial.forward_rows(out, masked, mask_rows, zt_uncond).data
            zt_set = np.take_along_axis(z_temporal, idx[:, :, None], axis=1)
            zu_set = np.take_along_axis(z_uncond, idx[:, :, None], axis=1)
        x = np.take_along_axis(x0, idx[:, :, None], axis=1)
        dt = 1.0 / steps
        for step in range(steps):
            t = step / steps
            v_full = model.flow.velocity(Tensor(x), t, Tensor(z_set)).data
            if need_aux:
                v_temporal = model.flow.velocity(Tensor(x), t, Tensor(zt_set)).data
                v_uncond = model.flow.velocity(Tensor(x), t, Tensor(zu_set)).data
                v = cfg_velocity(v_uncond, v_temporal, v_full, scales)
            else:
                v = v_full
            x = x + dt * v
        np.put_along_axis(out, idx[:, :, None], x, axis=1)
        np.put_along_axis(masked, idx[:, :, None], 0.0, axis=1)
        start += size
    return out


def generate_frame(zt: TemporalEmbedding, zs: CanvasEmbedding | None, model: VideoModel,
                   decode_steps: int, scales: GuidanceScales, aug: AugmentConfig,
                   rng: RngStream) -> TokenGrid:
    """Decode one frame from its conditioning embeddings.

    `zs` must already be augmented per `aug` (or None for the uniform-mask
    fallback). Deterministic given (inputs, rng seed).
    """
    if decode_steps < 1:
        raise ValueError("decode_steps must be >= 1")
    if aug.mode != "inference":
        raise ValueError("generate_frame expects an inference-mode AugmentConfig")
    canvas_rows = zs.zs[None] if zs is not None else None
    tokens = _decode_frames(model, zt.zt[None], canvas_rows, decode_steps, scales, [rng])
    return TokenGrid(tokens[0], frame_index=zt.frame_index)


@dataclass
class SampleSettings:
    """Everything the rollout loop needs besides the model and the seed."""

    decode_steps: int = 6
    scales: GuidanceScales = GuidanceScales()
    aug: AugmentConfig = AugmentConfig()
    group: int = 1


def rollout_batch(model: VideoModel, cond: np.ndarray, num_new: int,
                  settings: SampleSettings, seed: int,
                  collect_canvases: bool = False,
                  force_all_branches: bool = False) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Continue a batch of videos by `num_new` frames.

    cond is [B, T0, H, W, C] with T0 >= 1. Frames are produced in groups of
    `settings.group`: one temporal step conditions all canvases of its group,
    and the whole group is decoded in one batched pass. Each (clip, frame)
    pair has its own noise substream, so a longer rollout reproduces a
    shorter one exactly on the shared prefix. Trailing frames of a partial
    final group are computed and discarded for the same reason.
    """
    cfg = model.cfg
    batch, t0 = cond.shape[0], cond.shape[1]
    group = settings.group
    if t0 < 1:
        raise ValueError("rollout needs at least one conditioning frame")
    if num_new < 0:
        raise ValueError("num_new must be >= 0")
    if group < 1 or (cfg.use_canvas and model.canvas is not None and group > len(model.canvas.heads)):
        raise ValueError(f"group={group} not supported by this model")
    if not cfg.use_canvas and group > 1:
        raise ValueError("multi-frame groups require the canvas network")
    if num_new == 0:
        return (cond.copy(), np.zeros((batch, 0, cfg.height, cfg.width, cfg.channels), np.float32)) \
            if collect_canvases else cond.copy()
    total_steps = -(-num_new // group)
    if t0 + total_steps * group > cfg.max_frames:
        raise ValueError(f"rollout of {t0 + num_new} frames exceeds max_frames={cfg.max_frames}")

    base = RngStream(seed)
    clip_streams = [base.substream("clip", c) for c in range(batch)]

    tokens = patchify_array(cond.astype(np.float32), cfg.patch)  # [B, T0, n, dt]
    cache = model.new_cache()
    out_full = model.temporal.forward_incremental(tokens, cache)
    zt = out_full.data[:, -1]  # [B, n, d]

    frames = [cond[:, i].astype(np.float32) for i in range(t0)]
    canvases: list[np.ndarray] = []
    fr = t0
    while len(frames) - t0 < num_new:
        prev = patchify_array(frames[-1], cfg.patch)
        if model.canvas is not None:
            eps_prev = np.stack([cs.substream("aug_prev", fr).gaussian((cfg.n_tokens, cfg.token_dim))
                                 for cs in clip_streams])
            prev_aug = prev * (1.0 - settings.aug.r) + eps_prev * settings.aug.r
            zs_list = [z.data for z in model.canvas.forward(Tensor(zt), Tensor(prev_aug), group)]
            canvas_rows = []
            for g, zs in enumerate(zs_list):
                if collect_canvases:
                    proj = model.canvas.project(Tensor(zs)).data
                    canvases.append(unpatchify_array(proj, cfg.height, cfg.width, cfg.patch, cfg.channels))
                eps_c = np.stack([cs.substream("aug_canvas", fr + g).gaussian((cfg.n_tokens, cfg.dim))
                                  for cs in clip_streams])
                canvas_rows.append(zs * (1.0 - settings.aug.r_prime) + eps_c * settings.aug.r_prime)
            canvas_flat = np.concatenate(canvas_rows, axis=0)  # [B*G, n, d], clips grouped per g
        else:
            canvas_flat = None
        zt_flat = np.concatenate([zt] * group, axis=0)
        frame_streams = [cs.substream("frame", fr + g) for g in range(group) for cs in clip_streams]
        decoded = _decode_frames(model, zt_flat, canvas_flat, settings.decode_steps,
                                 settings.scales, frame_streams,
                                 force_all_branches=force_all_branches)
        group_tokens = decoded.reshape(group, batch, cfg.n_tokens, cfg.token_dim)
        for g in range(group):
            frames.append(unpatchify_array(group_tokens[g], cfg.height, cfg.width, cfg.patch, cfg.channels))
        new_tokens = np.swapaxes(group_tokens, 0, 1)  # [B, G, n, dt]
        out_full = model.temporal.forward_incremental(new_tokens, cache)
        zt = out_full.data[:, -1]
        fr += group

    video = np.stack(frames[:t0 + num_new], axis=1)
    if collect_canvases:
        canv = np.stack(canvases, axis=1)[:, :num_new] if canvases else \
            np.zeros((batch, 0, cfg.height, cfg.width, cfg.channels), np.float32)
        return video, canv
    return video


def rollout(model: VideoModel, cond_frames: np.ndarray, num_new: int,
            settings: SampleSettings, seed: int,
            collect_canvases: bool = False, force_all_branches: bool = False):
    """Single-video rollout; see rollout_batch."""
    if cond_frames.ndim != 4:
        raise ValueError(f"expected [T, H, W, C] conditioning video, got {cond_frames.shape}")
    result = rollout_batch(model, cond_frames[None], num_new, settings, seed,
                           collect_canvases=collect_canvases,
                           force_all_branches=force_all_branches)
    if collect_canvases:
        return result[0][0], result[1][0]
    return result[0]


class Sampler:
    """A model bound to sampling settings; the unit eval protocols consume."""

    def __init__(self, model: VideoModel, settings: SampleSettings):
        self.model = model
        self.settings = settings

    def continue_video(self, cond: np.ndarray, num_new: int, seed: int) -> np.ndarray:
        """cond [B, T0, H, W, C] -> continuation [B, num_new, H, W, C]."""
        video = rollout_batch(self.model, cond, num_new, self.settings, seed)
        return video[:, cond.shape[1]:]
