"""Evaluation: a frozen random-feature clip embedder, a Fréchet distance
between Gaussian fits of real and generated clip features, PSNR, and the two
sampling protocols (fixed first-frame conditioning, and re-drawn conditioning
windows for a less biased score).

The embedder stands in for a pretrained video feature network: scores are
comparable between models evaluated with the same embedder seed, not across
embedders and not against any published numbers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import RngStream


def _conv(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    # x [B, H, W, Cin], w [k, k, Cin, Cout]
    k = w.shape[0]
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return np.einsum("bhwcij,ijco->bhwo", win, w, optimize=True)


class FeatureEmbedder:
    """Frozen, seed-initialized conv net mapping a clip to a feature vector.

    Two strided conv+ReLU stages, spatial mean pooling per frame, then
    temporal mean and standard deviation concatenated and linearly projected.
    Deterministic given (seed, input); weights never train.
    """

    def __init__(self, channels: int = 1, feature_dim: int = 32, seed: int = 2024):
        rng = RngStream(seed)
        self.w1 = rng.substream("w1").gaussian((3, 3, channels, 8), dtype=np.float64) / 3.0
        self.w2 = rng.substream("w2").gaussian((3, 3, 8, 16), dtype=np.float64) / math.sqrt(72.0)
        self.proj = rng.substream("proj").gaussian((32, feature_dim), dtype=np.float64) / math.sqrt(32.0)
        self.feature_dim = feature_dim

    def embed_clip(self, clip: np.ndarray) -> np.ndarray:
        return self.embed_batch(clip[None])[0]

    def embed_batch(self, clips: np.ndarray) -> np.ndarray:
        """[B, T, H, W, C] -> [B, feature_dim] float64."""
        b, t = clips.shape[:2]
        x = clips.reshape(b * t, *clips.shape[2:]).astype(np.float64)
        x = np.maximum(_conv(x, self.w1, 2), 0.0)
        x = np.maximum(_conv(x, self.w2, 2), 0.0)
        per_frame = x.mean(axis=(1, 2)).reshape(b, t, -1)  # [B, T, 16]
        feats = np.concatenate([per_frame.mean(axis=1), per_frame.std(axis=1)], axis=-1)
        return feats @ self.proj


def frechet_proxy(real_feats: np.ndarray, fake_feats: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    ||mu_r - mu_f||^2 + tr(S_r + S_f - 2 (S_r S_f)^{1/2}), with the matrix
    square root taken through symmetric eigendecompositions and negative
    eigenvalues clipped at zero.
    """
    real = np.asarray(real_feats, dtype=np.float64)
    fake = np.asarray(fake_feats, dtype=np.float64)
    if real.ndim != 2 or fake.ndim != 2 or real.shape[1] != fake.shape[1]:
        raise ValueError(f"feature sets must be [m, d] with equal d, got {real.shape} / {fake.shape}")
    if real.shape[0] < 2 or fake.shape[0] < 2:
        raise ValueError("need at least 2 samples per side to fit a Gaussian")
    mu_r, mu_f = real.mean(axis=0), fake.mean(axis=0)
    sig_r = np.cov(real, rowvar=False)
    sig_f = np.cov(fake, rowvar=False)
    vals_r, vecs_r = np.linalg.eigh(sig_r)
    root_r = (vecs_r * np.sqrt(np.clip(vals_r, 0.0, None))) @ vecs_r.T
    cross = np.linalg.eigvalsh(root_r @ sig_f @ root_r)
    trace_cross = np.sqrt(np.clip(cross, 0.0, None)).sum()
    dist = float(((mu_r - mu_f) ** 2).sum() + np.trace(sig_r) + np.trace(sig_f) - 2.0 * trace_cross)
    return max(dist, 0.0)


def psnr(reference: np.ndarray, candidate: np.ndarray) -> float:
    """Peak signal-to-noise ratio on the [0, 1] pixel range."""
    mse = float(np.mean((np.asarray(reference, np.float64) - np.asarray(candidate, np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * math.log10(mse)


@dataclass
class ProtocolResult:
    protocol: str
    seed: int
    score: float
    psnr: float
    real_clips: int
    fake_clips: int
    test_clips: int
    samples_per_condition: int

    def to_json_dict(self, config_hash: str = "") -> dict:
        out = {"protocol": self.protocol, "seed": self.seed, "score": self.score,
               "psnr": self.psnr, "real_clips": self.real_clips, "fake_clips": self.fake_clips,
               "test_clips": self.test_clips, "samples_per_condition": self.samples_per_condition}
        if config_hash:
            out["config_hash"] = config_hash
        return out


def eval_protocol_standard(sampler, dataset: np.ndarray, *, clips_per_condition: int = 16,
                           max_test_clips: int = 64, cond_frames: int = 1,
                           gen_len: int | None = None, embedder: FeatureEmbedder | None = None,
                           seed: int = 0) -> ProtocolResult:
    """Condition on the first frame(s) of each held-out clip and generate
    several continuations per condition; the real set is the ground-truth
    continuations.
    """
    if dataset.shape[0] < 2:
        raise ValueError("dataset must hold at least two clips")
    test = dataset[:max_test_clips]
    total = test.shape[1]
    gen_len = total - cond_frames if gen_len is None else gen_len
    if cond_frames + gen_len > total:
        raise ValueError("clips are too short for the requested generation length")
    embedder = embedder or FeatureEmbedder(channels=dataset.shape[-1])

    real = test[:, cond_frames:cond_frames + gen_len]
    real_feats = embedder.embed_batch(real)

    base = RngStream(seed)
    fake_feats = []
    psnr_vals = []
    for i, clip in enumerate(test):
        conds = np.repeat(clip[None, :cond_frames], clips_per_condition, axis=0)
        gen = sampler.continue_video(conds, gen_len, seed=base.substream("cond", i).seed)
        fake_feats.append(embedder.embed_batch(gen))
        psnr_vals.append(psnr(real[i], gen[0]))
    fake_feats = np.concatenate(fake_feats, axis=0)
    score = frechet_proxy(real_feats, fake_feats)
    return ProtocolResult("standard", seed, score, float(np.mean(psnr_vals)),
                          real_feats.shape[0], fake_feats.shape[0],
                          test.shape[0], clips_per_condition)


def eval_protocol_debiased(sampler, dataset: np.ndarray, *, repeats: int = 16,
                           max_test_clips: int = 64, cond_frames: int = 1,
                           gen_len: int = 4, embedder: FeatureEmbedder | None = None,
                           seed: int = 0) -> ProtocolResult:
    """Re-draw the conditioning window per repeat: each pass picks a random
    frame of every test clip as the condition and scores the continuation
    from there, reducing the bias of always starting at frame zero.
    """
    test = dataset[:max_test_clips]
    total = test.shape[1]
    span = total - cond_frames - gen_len
    if span < 0:
        raise ValueError(f"clips of {total} frames are too short for cond={cond_frames} + gen={gen_len}")
    embedder = embedder or FeatureEmbedder(channels=dataset.shape[-1])
    base = RngStream(seed)

    real_feats, fake_feats, psnr_vals = [], [], []
    for rep in range(repeats):
        rs = base.substream("repeat", rep)
        starts = rs.integers(0, span + 1, (test.shape[0],))
        conds = np.stack([test[i, s:s + cond_frames] for i, s in enumerate(starts)])
        reals = np.stack([test[i, s + cond_frames:s + cond_frames + gen_len]
                          for i, s in enumerate(starts)])
        gen = sampler.continue_video(conds, gen_len, seed=rs.substream("gen").seed)
        real_feats.append(embedder.embed_batch(reals))
        fake_feats.append(embedder.embed_batch(gen))
        psnr_vals.append(psnr(reals, gen))
    real_feats = np.concatenate(real_feats, axis=0)
    fake_feats = np.concatenate(fake_feats, axis=0)
    score = frechet_proxy(real_feats, fake_feats)
    return ProtocolResult("debiased", seed, score, float(np.mean(psnr_vals)),
                          real_feats.shape[0], fake_feats.shape[0], test.shape[0], repeats)
