"""The generator networks: a temporal transformer over frame history, a
canvas network that drafts the next frame(s), a masked spatial transformer,
and a per-token flow head that turns embeddings into pixels."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict, fields

import numpy as np

from .autodiff import Tensor, add, concat, gather_rows, gelu, mul, narrow, reshape, parameter
from .blocks import (
    KVCache, Linear, LayerNorm, Module, TokenGrid, TransformerBlock,
    DualPathBlock, build_hybrid_mask, sinusoidal_pe,
)
from .rng import RngStream


@dataclass
class ModelConfig:
    """Shapes and depths for all four sub-networks.

    The defaults are a small configuration that trains on a CPU in minutes:
    32x32 single-channel frames, 4px patches (64 tokens/frame), width 128.
    """

    height: int = 32
    width: int = 32
    channels: int = 1
    patch: int = 4
    dim: int = 128
    heads: int = 4
    temporal_layers: int = 2
    canvas_layers: int = 1
    spatial_layers: int = 2
    spatial_encoder_layers: int = 1
    flow_dim: int = 256
    flow_layers: int = 2
    flow_steps: int = 30
    group_size: int = 1
    max_frames: int = 32
    use_canvas: bool = True

    @property
    def n_tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def validate(self) -> None:
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"patch {self.patch} must divide frame {self.height}x{self.width}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.dim % 2:
            raise ValueError("dim must be even for the sinusoidal fallback encoding")
        if self.flow_steps < 1:
            raise ValueError("flow_steps must be >= 1")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if not 0 <= self.spatial_encoder_layers < self.spatial_layers:
            raise ValueError("need 0 <= spatial_encoder_layers < spatial_layers")
        for name in ("channels", "temporal_layers", "canvas_layers", "flow_dim",
                     "flow_layers", "max_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class TemporalEmbedding:
    """Summary of frame history used to condition the next frame: [n, dim]."""

    zt: np.ndarray
    frame_index: int


@dataclass
class CanvasEmbedding:
    """Deterministic coarse guess of a future frame, [n, dim]; offset is the
    number of frames ahead of the last observed one (1 = next frame)."""

    zs: np.ndarray
    group_offset: int = 1


@dataclass
class TemporalCache:
    """Per-layer KV caches plus the number of frames ingested so far."""

    layers: list[KVCache]
    frames: int = 0


class TemporalNet(Module):
    """Hybrid-masked transformer over frame tokens: causal at frame
    granularity, bidirectional within a frame. The outputs at frame i are the
    conditioning embedding for generating frame i+1."""

    def __init__(self, rng: RngStream, cfg: ModelConfig):
        self.cfg = cfg
        self.embed = Linear(rng.substream("embed"), cfg.token_dim, cfg.dim)
        self.pos = parameter(rng.substream("pos").gaussian((cfg.n_tokens, cfg.dim)) * 0.02)
        self.frame_emb = parameter(rng.substream("frame").gaussian((cfg.max_frames, cfg.dim)) * 0.02)
        self.blocks = [TransformerBlock(rng.substream("block", i), cfg.dim, cfg.heads)
                       for i in range(cfg.temporal_layers)]
        self.ln_out = LayerNorm(cfg.dim)

    def _embed_frames(self, tokens, frame_offset: int) -> Tensor:
        # tokens [..., F, n, d_tok]
        x = self.embed(tokens if isinstance(tokens, Tensor) else Tensor(tokens))
        num_frames = x.shape[-3]
        if frame_offset + num_frames > self.cfg.max_frames:
            raise ValueError(f"sequence of {frame_offset + num_frames} frames exceeds max_frames={self.cfg.max_frames}")
        femb = gather_rows(self.frame_emb, np.arange(frame_offset, frame_offset + num_frames))
        femb = reshape(femb, (num_frames, 1, self.cfg.dim))
        return add(add(x, self.pos), femb)

    def forward_full(self, tokens) -> Tensor:
        """All-frame pass: [..., F, n, d_tok] -> [..., F, n, dim]."""
        x = self._embed_frames(tokens, 0)
        *lead, num_frames, n, dim = x.shape
        x = reshape(x, (*lead, num_frames * n, dim))
        mask = build_hybrid_mask(num_frames, n)
        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_out(x)
        return reshape(x, (*lead, num_frames, n, dim))

    def new_cache(self) -> TemporalCache:
        return TemporalCache([KVCache() for _ in self.blocks])

    def forward_incremental(self, tokens, cache: TemporalCache) -> Tensor:
        """Append frames to the cache: [..., F, n, d_tok] -> [..., F, n, dim].

        The cache must already hold exactly the preceding frames.
        """
        x = self._embed_frames(tokens, cache.frames)
        *lead, num_frames, n, dim = x.shape
        expected = cache.frames * n
        if any(layer.length != expected for layer in cache.layers):
            raise ValueError("temporal cache length inconsistent with ingested frames")
        x = reshape(x, (*lead, num_frames * n, dim))
        mask_new = build_hybrid_mask(num_frames, n)
        for block, layer_cache in zip(self.blocks, cache.layers):
            x = block(x, cache=layer_cache, mask_new=mask_new)
        x = self.ln_out(x)
        cache.frames += num_frames
        return reshape(x, (*lead, num_frames, n, dim))


class CanvasHead(Module):
    """Two-layer MLP head mapping the shared trunk output to one canvas."""

    def __init__(self, rng: RngStream, dim: int):
        self.fc1 = Linear(rng.substream("fc1"), dim, dim)
        self.fc2 = Linear(rng.substream("fc2"), dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class CanvasNet(Module):
    """Deterministic draft of the next `group_size` frames.

    The temporal embedding and the embedded previous frame are summed
    token-wise, run through a small bidirectional trunk, and projected by one
    head per future-frame offset. `project` maps canvas embeddings to pixel
    patches and is the surface trained by the canvas reconstruction loss.
    """

    def __init__(self, rng: RngStream, cfg: ModelConfig):
        self.cfg = cfg
        self.embed = Linear(rng.substream("embed"), cfg.token_dim, cfg.dim)
        self.pos = parameter(rng.substream("pos").gaussian((cfg.n_tokens, cfg.dim)) * 0.02)
        self.blocks = [TransformerBlock(rng.substream("block", i), cfg.dim, cfg.heads)
                       for i in range(cfg.canvas_layers)]
        self.ln_out = LayerNorm(cfg.dim)
        self.heads = [CanvasHead(rng.substream("head", g), cfg.dim) for g in range(cfg.group_size)]
        self.proj = Linear(rng.substream("proj"), cfg.dim, cfg.token_dim)

    def trunk(self, zt, prev_tokens) -> Tensor:
        zt = zt if isinstance(zt, Tensor) else Tensor(zt)
        prev = prev_tokens if isinstance(prev_tokens, Tensor) else Tensor(prev_tokens)
        x = add(add(zt, self.embed(prev)), self.pos)
        for block in self.blocks:
            x = block(x, None)
        return self.ln_out(x)

    def forward(self, zt, prev_tokens, group: int) -> list[Tensor]:
        if group < 1 or group > len(self.heads):
            raise ValueError(f"requested {group} canvases but model has {len(self.heads)} heads")
        t = self.trunk(zt, prev_tokens)
        return [self.heads[g](t) for g in range(group)]

    def project(self, zs) -> Tensor:
        zs = zs if isinstance(zs, Tensor) else Tensor(zs)
        return self.proj(zs)

    def grow_heads(self, rng: RngStream, new_group: int) -> None:
        """Add canvas heads up to `new_group`, each initialized as a copy of
        the first head so a trained draft transfers to longer offsets."""
        while len(self.heads) < new_group:
            head = CanvasHead(rng.substream("head", len(self.heads)), self.cfg.dim)
            head.fc1.w.assign(self.heads[0].fc1.w.data.copy())
            head.fc1.b.assign(self.heads[0].fc1.b.data.copy())
            head.fc2.w.assign(self.heads[0].fc2.w.data.copy())
            head.fc2.b.assign(self.heads[0].fc2.b.data.copy())
            self.heads.append(head)


class SpatialNet(Module):
    """Masked transformer over one frame's token slots.

    Clean tokens pass through encoder blocks (masked slots are invisible
    there); decoder blocks see every slot, with conditioning rows standing in
    at masked positions, plus the temporal embedding prepended as context
    tokens. Decoder MLPs are routed separately for conditioning vs clean
    tokens.
    """

    def __init__(self, rng: RngStream, cfg: ModelConfig):
        self.cfg = cfg
        self.embed = Linear(rng.substream("embed"), cfg.token_dim, cfg.dim)
        self.pos = parameter(rng.substream("pos").gaussian((cfg.n_tokens, cfg.dim)) * 0.02)
        self.ctx_pos = parameter(rng.substream("ctx_pos").gaussian((cfg.n_tokens, cfg.dim)) * 0.02)
        self.mask_vec = parameter(rng.substream("mask_vec").gaussian((cfg.dim,)) * 0.02)
        self.enc_blocks = [TransformerBlock(rng.substream("enc", i), cfg.dim, cfg.heads)
                           for i in range(cfg.spatial_encoder_layers)]
        self.dec_blocks = [DualPathBlock(rng.substream("dec", i), cfg.dim, cfg.heads)
                           for i in range(cfg.spatial_layers - cfg.spatial_encoder_layers)]
        self.ln_out = LayerNorm(cfg.dim)

    def mask_rows(self, lead_shape: tuple[int, ...]) -> Tensor:
        """The uniform learnable mask row broadcast to [..., n, dim]."""
        n, d = self.cfg.n_tokens, self.cfg.dim
        return add(Tensor(np.zeros((*lead_shape, n, d), dtype=np.float32)), self.mask_vec)

    def forward_rows(self, clean_tokens: np.ndarray, masked: np.ndarray,
                     cond_rows: Tensor, zt_rows: Tensor) -> Tensor:
        """Token-slot embeddings for one frame per batch element.

        clean_tokens: [..., n, d_tok]; entries at masked slots are ignored.
        masked:       [..., n, 1] float indicator, 1.0 = masked slot.
        cond_rows:    [..., n, dim], the conditioning row used at masked slots.
        zt_rows:      [..., n, dim] temporal context tokens.
        Returns [..., n, dim] embeddings (meaningful at masked slots).
        """
        n, d = self.cfg.n_tokens, self.cfg.dim
        e = add(self.embed(Tensor(clean_tokens)), self.pos)
        clean = 1.0 - masked[..., 0]
        # encoder: masked slots are neither keys nor useful queries; give each
        # row itself so no softmax row is empty, outputs there are discarded
        enc_mask = (clean[..., None, :] > 0.5) | np.eye(n, dtype=bool)
        for block in self.enc_blocks:
            e = block(e, enc_mask)
        ind = Tensor(masked.astype(np.float32))
        slots = add(mul(ind, add(cond_rows, self.pos)), mul(Tensor(1.0 - masked), e))
        seq = concat([add(zt_rows, self.ctx_pos), slots], axis=-2)
        path = np.concatenate([np.zeros_like(masked), masked], axis=-2)
        for block in self.dec_blocks:
            seq = block(seq, path)
        return self.ln_out(narrow(seq, -2, n, n))


def _time_features(t, lead_shape: tuple[int, ...], dtype) -> np.ndarray:
    """Small fixed embedding of the flow time: [t, sin/cos at two frequencies]."""
    tv = np.asarray(t, dtype=np.float64)
    if tv.ndim == 0:
        # scalar time (the sampling loop): five floats broadcast over rows
        row = np.array([tv, math.sin(2.0 * math.pi * tv), math.cos(2.0 * math.pi * tv),
                        math.sin(4.0 * math.pi * tv), math.cos(4.0 * math.pi * tv)], dtype=dtype)
        return np.broadcast_to(row, (*lead_shape, TIME_FEATURES))
    tv = np.broadcast_to(tv, lead_shape)
    feats = np.stack([
        tv,
        np.sin(2.0 * math.pi * tv), np.cos(2.0 * math.pi * tv),
        np.sin(4.0 * math.pi * tv), np.cos(4.0 * math.pi * tv),
    ], axis=-1)
    return feats.astype(dtype)


TIME_FEATURES = 5


class FlowHead(Module):
    """Per-token velocity field: an MLP over (noisy token, time, embedding)."""

    def __init__(self, rng: RngStream, cfg: ModelConfig):
        self.cfg = cfg
        d_in = cfg.token_dim + cfg.dim + TIME_FEATURES
        self.fc_in = Linear(rng.substream("in"), d_in, cfg.flow_dim)
        self.hidden = [Linear(rng.substream("h", i), cfg.flow_dim, cfg.flow_dim)
                       for i in range(cfg.flow_layers - 1)]
        self.fc_out = Linear(rng.substream("out"), cfg.flow_dim, cfg.token_dim)

    def velocity(self, x_t, t, z) -> Tensor:
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        z = z if isinstance(z, Tensor) else Tensor(z)
        tv = np.asarray(t, dtype=np.float64)
        if tv.min() < 0.0 or tv.max() > 1.0:
            raise ValueError(f"flow time must lie in [0, 1], got range [{tv.min()}, {tv.max()}]")
        feats = Tensor(_time_features(t, x_t.shape[:-1], np.float32))
        h = gelu(self.fc_in(concat([x_t, z, feats], axis=-1)))
        for layer in self.hidden:
            h = gelu(layer(h))
        return self.fc_out(h)


class VideoModel(Module):
    """All networks plus the unconditional-temporal fallback vector."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = RngStream(seed)
        self.temporal = TemporalNet(rng.substream("temporal"), cfg)
        self.canvas = CanvasNet(rng.substream("canvas"), cfg) if cfg.use_canvas else None
        self.spatial = SpatialNet(rng.substream("spatial"), cfg)
        self.flow = FlowHead(rng.substream("flow"), cfg)
        self.uncond_vec = parameter(rng.substream("uncond").gaussian((cfg.dim,)) * 0.02)

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + "uncond_vec": self.uncond_vec}
        out.update(self.temporal.named_params(prefix + "temporal."))
        if self.canvas is not None:
            out.update(self.canvas.named_params(prefix + "canvas."))
        out.update(self.spatial.named_params(prefix + "spatial."))
        out.update(self.flow.named_params(prefix + "flow."))
        return out

    def uncond_temporal_rows(self, lead_shape: tuple[int, ...] = ()) -> Tensor:
        """Stand-in for the temporal condition: a learnable vector plus a
        fixed sinusoidal positional code, broadcast to [..., n, dim]."""
        pe = sinusoidal_pe(self.cfg.n_tokens, self.cfg.dim)
        base = add(self.uncond_vec, Tensor(pe))
        if lead_shape:
            zeros = Tensor(np.zeros((*lead_shape, self.cfg.n_tokens, self.cfg.dim), dtype=np.float32))
            base = add(zeros, base)
        return base

    # -- contract-level single-sequence wrappers ----------------------------

    def new_cache(self) -> TemporalCache:
        return self.temporal.new_cache()

    def temporal_forward(self, history: list[TokenGrid],
                         cache: TemporalCache | None = None) -> tuple[TemporalEmbedding, TemporalCache]:
        """Embedding that conditions the frame after `history[-1]`.

        With a cache holding all but the newest frames, only the new tail is
        processed; the result is identical to a full recompute.
        """
        if not history:
            raise ValueError("temporal_forward requires at least one history frame")
        if cache is None:
            cache = self.new_cache()
        new = history[cache.frames:]
        if cache.frames + len(new) != len(history):
            raise ValueError(f"cache holds {cache.frames} frames but history has {len(history)}")
        if not new:
            raise ValueError("no new frames to ingest; cache already covers the history")
        tokens = np.stack([g.tokens for g in new])
        out = self.temporal.forward_incremental(tokens, cache)
        zt = out.data[-1]
        return TemporalEmbedding(zt, frame_index=len(history)), cache

    def canvas_forward(self, zt: TemporalEmbedding, prev_frame: TokenGrid,
                       group: int = 1) -> list[CanvasEmbedding]:
        if self.canvas is None:
            raise ValueError("model was built without a canvas network")
        outs = self.canvas.forward(zt.zt, prev_frame.tokens, group)
        return [CanvasEmbedding(o.data, group_offset=g + 1) for g, o in enumerate(outs)]

    def canvas_project(self, zs: CanvasEmbedding) -> TokenGrid:
        if self.canvas is None:
            raise ValueError("model was built without a canvas network")
        return TokenGrid(self.canvas.project(zs.zs).data, frame_index=zs.group_offset)

    def spatial_forward(self, known_tokens: np.ndarray, known_positions: np.ndarray,
                        canvas: CanvasEmbedding | None, zt: TemporalEmbedding,
                        mask_positions: np.ndarray) -> np.ndarray:
        """Embeddings for the masked positions of one frame.

        known_positions and mask_positions must partition range(n). With a
        canvas, its rows condition the masked slots; otherwise the uniform
        learnable mask row does.
        """
        n = self.cfg.n_tokens
        known_positions = np.asarray(known_positions, dtype=np.int64)
        mask_positions = np.asarray(mask_positions, dtype=np.int64)
        combined = np.concatenate([known_positions, mask_positions])
        if len(np.intersect1d(known_positions, mask_positions)):
            raise ValueError("known and masked position sets overlap")
        if not np.array_equal(np.sort(combined), np.arange(n)):
            raise ValueError("known and masked positions must cover all token slots")
        if mask_positions.size == 0:
            return np.zeros((0, self.cfg.dim), dtype=np.float32)
        clean = np.zeros((n, self.cfg.token_dim), dtype=np.float32)
        clean[known_positions] = known_tokens
        masked = np.zeros((n, 1), dtype=np.float32)
        masked[mask_positions] = 1.0
        cond = Tensor(canvas.zs) if canvas is not None else self.spatial.mask_rows(())
        z = self.spatial.forward_rows(clean, masked, cond, Tensor(zt.zt))
        return z.data[mask_positions]

    def flow_velocity(self, x_t, t, z) -> np.ndarray:
        return self.flow.velocity(x_t, t, z).data

    def flow_sample(self, z: np.ndarray, steps: int, rng: RngStream) -> np.ndarray:
        """Euler integration of the velocity field from Gaussian noise at t=0
        to t=1 in `steps` uniform steps; one token per row of `z`."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        x = rng.gaussian((*z.shape[:-1], self.cfg.token_dim))
        dt = 1.0 / steps
        for i in range(steps):
            v = self.flow.velocity(Tensor(x), i / steps, Tensor(z)).data
            x = x + dt * v
        return x
