"""Transformer building blocks: patch tokenization, attention masks, masked
multi-head attention with an append-only KV cache, norms and MLPs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor, add, gelu, layer_norm, linear, matmul, mul, parameter, reshape,
    softmax, transpose,
)
from .rng import RngStream

NEG_INF = -1e9


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------


@dataclass
class TokenGrid:
    """Per-frame token sequence: n patches of dimension patch*patch*channels."""

    tokens: np.ndarray
    frame_index: int = 0


def patchify_array(frames: np.ndarray, patch: int) -> np.ndarray:
    """[..., H, W, C] -> [..., n, patch*patch*C] in raster order of patches.

    Lossless: each token is one patch flattened in raster order.
    """
    *lead, h, w, c = frames.shape
    if h % patch or w % patch:
        raise ValueError(f"patch size {patch} does not divide frame dims {h}x{w}")
    gh, gw = h // patch, w // patch
    x = frames.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)  # [..., gh, gw, patch, patch, c]
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, patch * patch * c))


def unpatchify_array(tokens: np.ndarray, height: int, width: int, patch: int, channels: int) -> np.ndarray:
    *lead, n, d_tok = tokens.shape
    gh, gw = height // patch, width // patch
    if n != gh * gw or d_tok != patch * patch * channels:
        raise ValueError(f"token grid {n}x{d_tok} inconsistent with {height}x{width}/p{patch}/c{channels}")
    x = tokens.reshape(*lead, gh, gw, patch, patch, channels)
    x = np.moveaxis(x, -3, -4)
    return np.ascontiguousarray(x.reshape(*lead, height, width, channels))


def patchify(frame: np.ndarray, patch: int, frame_index: int = 0) -> TokenGrid:
    if frame.ndim != 3:
        raise ValueError(f"expected one [H, W, C] frame, got shape {frame.shape}")
    return TokenGrid(patchify_array(frame, patch), frame_index)


def unpatchify(grid: TokenGrid, height: int, width: int, patch: int, channels: int) -> np.ndarray:
    return unpatchify_array(grid.tokens, height, width, patch, channels)


# ---------------------------------------------------------------------------
# masks and positional encodings
# ---------------------------------------------------------------------------


def build_hybrid_mask(num_frames: int, tokens_per_frame: int) -> np.ndarray:
    """Attention mask that is causal across frames, bidirectional within one.

    Boolean [L, L] with L = num_frames * tokens_per_frame; True = may attend.
    """
    if num_frames < 1 or tokens_per_frame < 1:
        raise ValueError("num_frames and tokens_per_frame must be >= 1")
    frame_of = np.arange(num_frames * tokens_per_frame) // tokens_per_frame
    return frame_of[None, :] <= frame_of[:, None]


def sinusoidal_pe(length: int, dim: int) -> np.ndarray:
    """Interleaved sin/cos positional encoding, [length, dim] float32."""
    if dim % 2:
        raise ValueError(f"sinusoidal encoding needs even dim, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.exp(-math.log(10000.0) * np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    angles = pos * freqs[None, :]
    pe = np.zeros((length, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe.astype(np.float32)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, dim = x.shape
    x = reshape(x, (*lead, length, heads, dim // heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = transpose(x, axes)
    *lead, length, heads, dh = x.shape
    return reshape(x, (*lead, length, heads * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None, heads: int) -> Tensor:
    """Masked multi-head scaled dot-product attention.

    `mask` is boolean, True where a query may attend; it must broadcast to
    [..., Lq, Lk]. `None` means fully visible. Rows with no visible key are
    rejected because their softmax is undefined.
    """
    *_, lq, dim = q.shape
    lk = k.shape[-2]
    if dim % heads:
        raise ValueError(f"dim {dim} not divisible by heads {heads}")
    if k.shape != v.shape:
        raise ValueError(f"k/v shape mismatch: {k.shape} vs {v.shape}")
    if lq == 0:
        return Tensor(np.zeros((*q.shape[:-2], 0, dim), dtype=q.dtype))
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    axes = list(range(kh.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = mul(matmul(qh, transpose(kh, axes)), 1.0 / math.sqrt(dim // heads))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (lq, lk):
            raise ValueError(f"mask trailing dims {mask.shape[-2:]} != ({lq}, {lk})")
        if not mask.any(axis=-1).all():
            raise ValueError("attention mask has a fully masked query row")
        bias = np.where(mask, 0.0, NEG_INF).astype(np.float32)
        if bias.ndim == 2:
            scores = add(scores, Tensor(bias))
        else:
            # per-sequence masks broadcast across the head axis
            scores = add(scores, Tensor(np.expand_dims(bias, -3)))
    weights = softmax(scores, axis=-1)
    return _merge_heads(matmul(weights, vh))


class KVCache:
    """Append-only key/value store for one attention layer."""

    def __init__(self):
        self.k: np.ndarray | None = None
        self.v: np.ndarray | None = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[-2]

    def append(self, k_new: np.ndarray, v_new: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.k is None:
            self.k, self.v = k_new, v_new
        else:
            if k_new.shape[:-2] != self.k.shape[:-2] or k_new.shape[-1] != self.k.shape[-1]:
                raise ValueError("cache append with mismatched batch/feature dims")
            self.k = np.concatenate([self.k, k_new], axis=-2)
            self.v = np.concatenate([self.v, v_new], axis=-2)
        return self.k, self.v


def attend_with_cache(cache: KVCache, new_q: Tensor, new_k: Tensor, new_v: Tensor,
                      heads: int, mask_new: np.ndarray | None = None) -> tuple[Tensor, KVCache]:
    """Append new keys/values, then attend new queries over the full history.

    New queries see every cached position; visibility among the appended
    block itself is `mask_new` ([Lnew, Lnew] boolean, default fully visible).
    Appending zero tokens returns an empty output and leaves the cache alone.
    """
    lnew = new_q.shape[-2]
    if lnew == 0:
        return Tensor(np.zeros((*new_q.shape[:-2], 0, new_q.shape[-1]), dtype=new_q.dtype)), cache
    if new_k.shape[-2] != lnew:
        raise ValueError("cached attention expects equal new q/k lengths")
    prior = cache.length
    k_all, v_all = cache.append(new_k.data, new_v.data)
    mask = np.ones((lnew, prior + lnew), dtype=bool)
    if mask_new is not None:
        mask[:, prior:] = mask_new
    out = attention(new_q, Tensor(k_all), Tensor(v_all), mask, heads)
    return out, cache


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Module:
    """Base with recursive named-parameter collection."""

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_params(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_params(f"{prefix}{name}.{i}."))
        return out


class Linear(Module):
    def __init__(self, rng: RngStream, d_in: int, d_out: int, bias: bool = True):
        self.w = parameter(rng.gaussian((d_in, d_out)) / math.sqrt(d_in))
        self.b = parameter(np.zeros(d_out, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim, dtype=np.float32))
        self.beta = parameter(np.zeros(dim, dtype=np.float32))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Two-layer GELU MLP; default expansion 4."""

    def __init__(self, rng: RngStream, dim: int, hidden: int | None = None):
        hidden = 4 * dim if hidden is None else hidden
        self.fc1 = Linear(rng.substream("fc1"), dim, hidden)
        self.fc2 = Linear(rng.substream("fc2"), hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class SelfAttention(Module):
    def __init__(self, rng: RngStream, dim: int, heads: int):
        self.heads = heads
        self.wq = Linear(rng.substream("q"), dim, dim)
        # a key bias shifts every score in a row equally, which softmax
        # cancels; the parameter would be exactly functionless
        self.wk = Linear(rng.substream("k"), dim, dim, bias=False)
        self.wv = Linear(rng.substream("v"), dim, dim)
        self.wo = Linear(rng.substream("o"), dim, dim)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        out = attention(self.wq(x), self.wk(x), self.wv(x), mask, self.heads)
        return self.wo(out)

    def cached(self, x: Tensor, cache: KVCache, mask_new: np.ndarray | None = None) -> Tensor:
        out, _ = attend_with_cache(cache, self.wq(x), self.wk(x), self.wv(x), self.heads, mask_new)
        return self.wo(out)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, rng: RngStream, dim: int, heads: int):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(rng.substream("attn"), dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(rng.substream("mlp"), dim)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None,
                 cache: KVCache | None = None, mask_new: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        a = self.attn(h, mask) if cache is None else self.attn.cached(h, cache, mask_new)
        x = add(x, a)
        return add(x, self.mlp(self.ln2(x)))


class DualPathBlock(Module):
    """Pre-norm block whose MLP is routed per token: one path for
    conditioning (canvas/mask) slots, another for clean/context tokens.
    Attention parameters are shared across both paths."""

    def __init__(self, rng: RngStream, dim: int, heads: int):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(rng.substream("attn"), dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp_cond = MLP(rng.substream("mlp_cond"), dim)
        self.mlp_clean = MLP(rng.substream("mlp_clean"), dim)

    def __call__(self, x: Tensor, path_indicator: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        x = add(x, self.attn(self.ln1(x), mask))
        h = self.ln2(x)
        ind = Tensor(path_indicator)
        blended = add(mul(ind, self.mlp_cond(h)), mul(Tensor(1.0 - path_indicator), self.mlp_clean(h)))
        return add(x, blended)
