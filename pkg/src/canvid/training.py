"""Losses, masking-ratio sampling, condition dropout, and the train loop.

One step computes, for every valid frame offset in parallel: the temporal
embedding (hybrid-masked), the canvas draft from the noise-augmented previous
frame, the canvas reconstruction loss against the true patches, and the
flow-matching loss of the token head at randomly masked slots.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import GradTape, Tensor, add, backward, concat, gather_rows, mean, mul, reshape, sub, sum_
from .blocks import patchify_array
from .generation import AugmentConfig
from .model import VideoModel
from .optim import OptState, adam_step, grad_norm, warmup_lr
from .rng import RngStream

MASK_RATIO_LOW = 0.5
MASK_RATIO_HIGH = 1.0
DROP_BRANCH_P = 0.05


@dataclass
class TrainBatch:
    """A batch of fixed-length clips plus the ids of their source videos."""

    videos: np.ndarray  # [B, N, H, W, C], values in [0, 1]
    clip_ids: np.ndarray

    def __post_init__(self):
        if self.videos.ndim != 5 or self.videos.shape[1] < 2:
            raise ValueError("train batches need [B, N>=2, H, W, C] videos")


@dataclass(frozen=True)
class DropoutFlags:
    """Per-sample condition dropout for guidance training."""

    drop_spatial: bool
    drop_temporal: bool


def sample_dropout_flags(rng: RngStream) -> DropoutFlags:
    """Spatial-only, temporal-only and both, 5% each; otherwise none."""
    u = float(rng.uniform(()))
    if u < DROP_BRANCH_P:
        return DropoutFlags(True, False)
    if u < 2 * DROP_BRANCH_P:
        return DropoutFlags(False, True)
    if u < 3 * DROP_BRANCH_P:
        return DropoutFlags(True, True)
    return DropoutFlags(False, False)


def sample_mask_set(n: int, rng: RngStream) -> np.ndarray:
    """Masked slot indices: ratio ~ U(0.5, 1.0), then a uniform subset."""
    if n < 1:
        raise ValueError("need n >= 1")
    ratio = float(rng.uniform((), MASK_RATIO_LOW, MASK_RATIO_HIGH))
    k = min(n, max(1, int(round(ratio * n))))
    return rng.choice_without_replacement(n, k)


def canvas_loss(pred: Tensor, target) -> Tensor:
    """Mean over tokens of the squared L2 distance to the true patches."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"canvas loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    per_token = sum_(mul(diff, diff), axis=-1)
    return mean(per_token)


def flow_matching_loss(flow, x1: np.ndarray, z: Tensor, rng: RngStream) -> Tensor:
    """Single-draw flow-matching loss for tokens x1 conditioned on z.

    Draws x0 ~ N(0, I) and t ~ U(0, 1), builds the interpolant, and penalizes
    the squared error of the predicted velocity against x1 - x0.
    """
    x0 = rng.gaussian(x1.shape)
    t = rng.uniform(x1.shape[:-1]).astype(np.float32)
    x_t = (1.0 - t[..., None]) * x0 + t[..., None] * x1
    v = flow.velocity(Tensor(x_t), t, z)
    diff = sub(v, Tensor(x1 - x0))
    return mean(sum_(mul(diff, diff), axis=-1))


@dataclass
class TrainSettings:
    lr: float = 1e-3
    warmup_steps: int = 200
    canvas_weight: float = 1.0
    flow_weight: float = 1.0
    canvas_grad_to_temporal: bool = True


def _stack_group(tensors: list[Tensor], axis: int) -> Tensor:
    parts = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis, 1)
        parts.append(reshape(t, shape))
    return concat(parts, axis=axis)


def compute_losses(model: VideoModel, videos: np.ndarray, settings: TrainSettings,
                   stream: RngStream, frame_steps: list[int] | None = None) -> dict:
    """Canvas + flow losses over all (sample, frame offset, group head) triples.

    All randomness is drawn from substreams keyed by batch row, frame step
    and head, so restricting `frame_steps` reproduces exactly the draws the
    full parallel computation uses for those steps.
    """
    cfg = model.cfg
    group = len(model.canvas.heads) if model.canvas is not None else 1
    batch, total_frames = videos.shape[0], videos.shape[1]
    steps_all = total_frames - group
    if steps_all < 1:
        raise ValueError(f"clips of {total_frames} frames cannot train a group of {group}")
    steps = list(range(steps_all)) if frame_steps is None else sorted(frame_steps)
    if any(j < 0 or j >= steps_all for j in steps):
        raise ValueError(f"frame_steps out of range [0, {steps_all})")
    n, d_tok, dim = cfg.n_tokens, cfg.token_dim, cfg.dim

    tokens = patchify_array(videos.astype(np.float32), cfg.patch)  # [B, N, n, dt]

    # per-(b, j) and per-(b, j, g) noise, drawn in blocks over the full ranges
    # so the draws do not depend on which frame steps are computed
    r_all = stream.substream("aug_r").uniform((batch, steps_all), 0.0, AugmentConfig.TRAIN_HIGH)
    eps_prev_all = stream.substream("aug_r_eps").gaussian((batch, steps_all, n, d_tok))
    rp_all = stream.substream("aug_rp").uniform((batch, steps_all, group), 0.0, AugmentConfig.TRAIN_HIGH)
    eps_canvas_all = stream.substream("aug_rp_eps").gaussian((batch, steps_all, group, n, dim))
    x0_all = stream.substream("flow_x0").gaussian((batch, steps_all, group, n, d_tok))
    t_all = stream.substream("flow_t").uniform((batch, steps_all, group, n)).astype(np.float32)
    drops = [sample_dropout_flags(stream.substream("drop", b)) for b in range(batch)]
    mask_sets = {(b, j, g): sample_mask_set(n, stream.substream("mask", b, j, g))
                 for b in range(batch) for j in steps for g in range(group)}

    sel = np.asarray(steps, dtype=np.int64)
    num_steps = len(sel)

    # temporal embeddings for every step at once (hybrid mask)
    t_out = model.temporal.forward_full(tokens[:, :steps_all])  # [B, S_all, n, dim]
    if num_steps == steps_all:
        zt = t_out
    else:
        idx2 = np.broadcast_to(sel[None, :], (batch, num_steps))
        flat = reshape(t_out, (batch, steps_all, n * dim))
        zt = reshape(gather_rows(flat, idx2), (batch, num_steps, n, dim))

    targets = np.stack([tokens[:, np.asarray(steps) + 1 + g] for g in range(group)], axis=2)
    # targets: [B, S, G, n, dt]

    metrics: dict[str, float] = {}
    if model.canvas is not None:
        r = r_all[:, sel, None, None].astype(np.float32)
        prev_aug = tokens[:, sel] * (1.0 - r) + eps_prev_all[:, sel] * r
        zt_for_canvas = zt if settings.canvas_grad_to_temporal else zt.detach()
        zs_list = model.canvas.forward(zt_for_canvas, Tensor(prev_aug), group)  # list of [B, S, n, dim]
        zs = _stack_group(zs_list, axis=2)  # [B, S, G, n, dim]
        pred = model.canvas.project(zs)
        c_loss = canvas_loss(pred, targets)
        rp = rp_all[:, sel, :, None, None].astype(np.float32)
        zs_cond = add(mul(zs, Tensor(1.0 - rp)), Tensor(eps_canvas_all[:, sel] * rp))
    else:
        c_loss = Tensor(np.zeros(()))
        zs_cond = None

    # assemble per-sequence conditioning for the spatial net
    masked = np.zeros((batch, num_steps, group, n, 1), dtype=np.float32)
    step_pos = {j: s for s, j in enumerate(steps)}
    for (b, j, g), idx in mask_sets.items():
        masked[b, step_pos[j], g, idx, 0] = 1.0

    drop_sp = np.array([f.drop_spatial for f in drops], dtype=np.float32)[:, None, None, None, None]
    drop_tmp = np.array([f.drop_temporal for f in drops], dtype=np.float32)[:, None, None, None, None]

    mask_rows = model.spatial.mask_rows((batch, num_steps, group))
    if zs_cond is None:
        cond = mask_rows
    else:
        cond = add(mul(Tensor(drop_sp), mask_rows), mul(Tensor(1.0 - drop_sp), zs_cond))

    zt_rep = _stack_group([zt] * group, axis=2)  # [B, S, G, n, dim]
    zt_unc = model.uncond_temporal_rows((batch, num_steps, group))
    zt_cond = add(mul(Tensor(drop_tmp), zt_unc), mul(Tensor(1.0 - drop_tmp), zt_rep))

    clean_tokens = targets * (1.0 - masked)  # masked slots zeroed; ignored anyway
    z = model.spatial.forward_rows(clean_tokens, masked, cond, zt_cond)

    x0 = x0_all[:, sel]
    t_draw = t_all[:, sel]
    x1 = targets
    x_t = (1.0 - t_draw[..., None]) * x0 + t_draw[..., None] * x1
    v = model.flow.velocity(Tensor(x_t), t_draw, z)
    diff = sub(v, Tensor(x1 - x0))
    per_pos = sum_(mul(diff, diff), axis=-1)  # [B, S, G, n]
    ind = Tensor(masked[..., 0])
    masked_count = float(masked.sum())
    f_loss = mul(sum_(mul(per_pos, ind)), 1.0 / masked_count)

    loss = add(mul(c_loss, settings.canvas_weight), mul(f_loss, settings.flow_weight))
    metrics.update(
        canvas_loss=float(c_loss.data),
        flow_loss=float(f_loss.data),
        flow_sumsq=float((per_pos.data * masked[..., 0]).sum()),
        masked_count=masked_count,
        canvas_sumsq=float(c_loss.data) * targets[..., 0].size,
        token_count=float(targets[..., 0].size),
    )
    return {"loss": loss, "metrics": metrics}


def train_step(batch: TrainBatch, model: VideoModel, opt: OptState,
               settings: TrainSettings, stream: RngStream) -> dict[str, float]:
    """One optimization step; returns loss metrics plus the gradient norm."""
    params = model.named_params()
    with GradTape() as tape:
        out = compute_losses(model, batch.videos, settings, stream)
    grads_by_tensor = backward(tape, out["loss"], params.values())
    grads = {name: grads_by_tensor[p] for name, p in params.items()}
    lr = warmup_lr(settings.lr, opt.step, settings.warmup_steps)
    adam_step(params, grads, opt, lr=lr)
    metrics = dict(out["metrics"])
    metrics["grad_norm"] = grad_norm(grads)
    metrics["lr"] = lr
    return metrics


def sample_batch(dataset: np.ndarray, batch_size: int, clip_len: int, rng: RngStream) -> TrainBatch:
    """Uniformly sample clips (with replacement) and a temporal crop."""
    count, total = dataset.shape[0], dataset.shape[1]
    if clip_len > total:
        raise ValueError(f"clip_len {clip_len} exceeds dataset clip length {total}")
    ids = rng.integers(0, count, (batch_size,))
    if total == clip_len:
        starts = np.zeros(batch_size, dtype=np.int64)
    else:
        starts = rng.integers(0, total - clip_len + 1, (batch_size,))
    videos = np.stack([dataset[i, s:s + clip_len] for i, s in zip(ids, starts)])
    return TrainBatch(videos, ids)


class TrainDiagnostics(RuntimeError):
    """Raised when training aborts on a non-finite loss; carries the step."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"non-finite values at step {step}: {cause}")
        self.step = step


def train_loop(model: VideoModel, dataset: np.ndarray, opt: OptState,
               settings: TrainSettings, *, steps: int, batch_size: int,
               clip_len: int, seed: int, on_step=None) -> list[dict]:
    """Run `steps` optimizer steps; deterministic given the seed.

    `on_step(step, metrics)` fires after every step (checkpointing, logging).
    A non-finite loss aborts with TrainDiagnostics so callers can keep the
    last good checkpoint.
    """
    history = []
    start = opt.step
    for step in range(start, start + steps):
        st = RngStream(seed).substream("step", step)
        batch = sample_batch(dataset, batch_size, clip_len, st.substream("data"))
        try:
            metrics = train_step(batch, model, opt, settings, st.substream("model"))
        except FloatingPointError as exc:
            raise TrainDiagnostics(step, exc) from exc
        metrics["step"] = step + 1
        history.append(metrics)
        if on_step is not None:
            on_step(step + 1, metrics)
    return history
