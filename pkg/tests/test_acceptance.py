"""Acceptance suite: one test per exit criterion, each at its stated
tolerance, with a per-criterion summary line printed at the end of the run.

The trained-model fixtures live in conftest.py and are shared across
criteria; budgets are fixed there.
"""
import time

import numpy as np
from canvid.autodiff import Tensor, mul, sum_
from canvid.blocks import (MLP, SelfAttention, build_hybrid_mask, patchify_array)
from canvid.checkpoint import load_checkpoint, save_checkpoint
from canvid.evalmetrics import (FeatureEmbedder, eval_protocol_debiased,
                                eval_protocol_standard, frechet_proxy)
from canvid.generation import (AugmentConfig, GuidanceScales, SampleSettings,
                               Sampler, cfg_velocity, cosine_set_sizes,
                               rollout_batch, schedule_sizes_bulk)
from canvid.model import ModelConfig, VideoModel
from canvid.rng import RngStream

from conftest import (ABLATION_STEPS, COINFLIP_SPEC, FINETUNE_STEPS, check,
                      record_criterion)
from util import param_finite_diff


def test_criterion_1_gradient_integrity():
    start = time.perf_counter()
    rng = RngStream(2001)
    worst = {}

    attn = SelfAttention(rng.substream("attn"), 16, 2)
    x_attn = Tensor(rng.gaussian((6, 16)))
    mask = build_hybrid_mask(2, 3)
    r_attn = rng.gaussian((6, 16))

    def attn_loss():
        return sum_(mul(attn(Tensor(x_attn.data), mask), Tensor(r_attn)))

    for name in attn.named_params():
        worst[f"attention.{name}"] = param_finite_diff(attn, name, attn_loss)

    mlp = MLP(rng.substream("mlp"), 16)
    x_mlp = Tensor(rng.gaussian((5, 16)))
    r_mlp = rng.gaussian((5, 16))

    def mlp_loss():
        return sum_(mul(mlp(Tensor(x_mlp.data)), Tensor(r_mlp)))

    for name in mlp.named_params():
        worst[f"mlp.{name}"] = param_finite_diff(mlp, name, mlp_loss)

    cfg = ModelConfig(height=8, width=8, patch=4, dim=8, heads=2, flow_dim=16,
                      flow_layers=2, max_frames=4)
    model = VideoModel(cfg, seed=2002)
    zs = Tensor(rng.gaussian((cfg.n_tokens, cfg.dim)))
    r_proj = rng.gaussian((cfg.n_tokens, cfg.token_dim))

    def proj_loss():
        return sum_(mul(model.canvas.project(Tensor(zs.data)), Tensor(r_proj)))

    for name in ("proj.w", "proj.b"):
        worst[f"canvas.{name}"] = param_finite_diff(model.canvas, name, proj_loss)

    x_t = rng.gaussian((6, cfg.token_dim))
    z = rng.gaussian((6, cfg.dim))
    t_vals = rng.uniform((6,)).astype(np.float32)
    r_flow = rng.gaussian((6, cfg.token_dim))

    def flow_loss():
        return sum_(mul(model.flow.velocity(Tensor(x_t), t_vals, Tensor(z)), Tensor(r_flow)))

    for name in model.flow.named_params():
        worst[f"flow.{name}"] = param_finite_diff(model.flow, name, flow_loss)

    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if v >= 1e-3}
    check("1", "gradient integrity of attention/MLP/projection/flow blocks",
          not bad and elapsed < 60.0,
          f"max rel err {max(worst.values()):.2e} over {len(worst)} params, {elapsed:.1f}s")


def test_criterion_2_kv_cache_equivalence():
    cfg = ModelConfig(height=16, width=16, dim=32, flow_dim=32, max_frames=12)
    model = VideoModel(cfg, seed=2003)
    video = RngStream(2004).uniform((8, 16, 16, 1)).astype(np.float32)
    tokens = patchify_array(video, cfg.patch)
    full = model.temporal.forward_full(tokens).data
    cache = model.new_cache()
    outs = [model.temporal.forward_incremental(tokens[f:f + 1], cache).data[0]
            for f in range(8)]
    diff = float(np.abs(np.stack(outs) - full).max())
    check("2", "frame-incremental temporal pass equals full recompute over 8 frames",
          diff < 1e-5, f"max abs diff {diff:.2e}")


def test_criterion_3_temporal_causality():
    cfg = ModelConfig(height=16, width=16, dim=32, flow_dim=32, max_frames=12)
    model = VideoModel(cfg, seed=2005)
    video = RngStream(2006).uniform((6, 16, 16, 1)).astype(np.float32)
    base = model.temporal.forward_full(patchify_array(video, cfg.patch)).data
    worst = 0.0
    for j in range(1, 6):
        edited = video.copy()
        edited[j] = 1.0 - edited[j]
        out = model.temporal.forward_full(patchify_array(edited, cfg.patch)).data
        # outputs at frames < j condition frames <= j and may not move
        worst = max(worst, float(np.abs(out[:j] - base[:j]).max()))
    check("3", "perturbing frame j never changes embeddings for frames <= j",
          worst < 1e-6, f"max leak {worst:.2e}")


def test_criterion_4_cfg_algebra_and_bitwise_path(coinflip_model):
    rng = RngStream(2007)
    vu, vt, vst = (rng.gaussian((4, 8)) for _ in range(3))
    exact = (cfg_velocity(vu, vt, vst, GuidanceScales(1, 1)) is vst
             and cfg_velocity(vu, vt, vst, GuidanceScales(0, 1)) is vt
             and cfg_velocity(vu, vt, vst, GuidanceScales(0, 0)) is vu)

    model = coinflip_model["model"]
    cond = coinflip_model["data"][:2, :1]
    settings = SampleSettings(decode_steps=6, scales=GuidanceScales(1, 1),
                              aug=AugmentConfig(), group=1)
    plain = rollout_batch(model, cond, 1, settings, seed=2008)
    forced = rollout_batch(model, cond, 1, settings, seed=2008, force_all_branches=True)
    bitwise = np.array_equal(plain, forced)
    check("4", "guidance reductions exact; unit scales match the guidance-free path bitwise",
          exact and bitwise, f"reductions={exact} bitwise={bitwise}")


def test_criterion_5_schedule_invariants_exhaustive():
    start = time.perf_counter()
    pairs = 0
    for num_steps in range(1, 1025):
        ns, sizes = schedule_sizes_bulk(num_steps, 1024)
        # every n_k >= 1 is exactly the strict decrease of the masked-count
        # curve m_k = n - cumsum(sizes); the sum pins its endpoints
        assert sizes.min() >= 1
        assert np.array_equal(sizes.sum(axis=1), ns)
        pairs += ns.size
    # bulk rows are the same values the per-pair op returns
    for num_steps in range(1, 65):
        ns, sizes = schedule_sizes_bulk(num_steps, 64)
        for i, n in enumerate(ns):
            assert np.array_equal(sizes[i], cosine_set_sizes(int(n), num_steps))
    sampler = RngStream(2009)
    for _ in range(300):
        n = int(sampler.integers(1, 1025, ()))
        k = int(sampler.integers(1, n + 1, ()))
        ns, sizes = schedule_sizes_bulk(k, 1024)
        assert np.array_equal(sizes[n - k], cosine_set_sizes(n, k))
    elapsed = time.perf_counter() - start
    check("5", "all (n<=1024, K<=n) schedules: sums, positivity, strict masked-count decrease",
          elapsed < 10.0 and pairs == 524_800, f"{pairs} pairs in {elapsed:.1f}s")


def test_criterion_6_canvas_reaches_conditional_mean(coinflip_model):
    from canvid.blocks import TokenGrid, unpatchify_array
    from canvid.data import coinflip_outcomes

    model = coinflip_model["model"]
    cfg = model.cfg
    first, right, left = coinflip_outcomes(COINFLIP_SPEC)
    grid = TokenGrid(patchify_array(first, cfg.patch), 0)
    zt, _ = model.temporal_forward([grid])
    zs = model.canvas_forward(zt, grid, 1)[0]
    canvas_img = unpatchify_array(model.canvas_project(zs).tokens,
                                  cfg.height, cfg.width, cfg.patch, cfg.channels)
    mean_img = (right + left) / 2.0
    mse_mean = float(np.mean((canvas_img - mean_img) ** 2))
    mse_ab = float(np.mean((right - left) ** 2))
    ok = mse_mean < 0.25 * mse_ab and coinflip_model["seconds"] < 1200.0
    check("6", "trained canvas approximates the two-outcome conditional mean",
          ok, f"mse-to-mean {mse_mean:.4f} vs bound {0.25 * mse_ab:.4f}, "
              f"trained {coinflip_model['seconds']:.0f}s")

    hist = coinflip_model["history"]
    early = float(np.mean([h["canvas_loss"] for h in hist[5:15]]))
    late = float(np.mean([h["canvas_loss"] for h in hist[-20:]]))
    record_criterion("6+", "canvas loss halves from its step-10 level", late < 0.5 * early,
                     f"{early:.3f} -> {late:.3f}")
    assert late < 0.5 * early


def test_criterion_7_canvas_beats_uniform_mask(ablation_models, bouncing_data):
    _, test = bouncing_data
    embedder = FeatureEmbedder(channels=1, seed=99)
    start = time.perf_counter()
    scores = {}
    for k in (2, 3, 6):
        for name in ("canvas", "nocanvas"):
            settings = SampleSettings(decode_steps=k, scales=GuidanceScales(1, 1),
                                      aug=AugmentConfig(), group=1)
            result = eval_protocol_standard(Sampler(ablation_models[name]["model"], settings),
                                            test, clips_per_condition=4, max_test_clips=24,
                                            embedder=embedder, seed=500)
            scores[(k, name)] = result.score
    eval_seconds = time.perf_counter() - start
    total = ablation_models["canvas"]["seconds"] + ablation_models["nocanvas"]["seconds"] + eval_seconds

    margin_at_2 = scores[(2, "canvas")] <= 0.8 * scores[(2, "nocanvas")]
    lower_everywhere = all(scores[(k, "canvas")] < scores[(k, "nocanvas")] for k in (2, 3, 6))
    detail = " ".join(f"K={k}:{scores[(k, 'canvas')]:.4f}/{scores[(k, 'nocanvas')]:.4f}"
                      for k in (2, 3, 6)) + f", total {total:.0f}s"
    check("7", "canvas variant scores >=20% lower at K=2 and lower at every K",
          margin_at_2 and lower_everywhere and total < 7200.0, detail)


def test_criterion_8_frechet_proxy_correctness():
    feats = RngStream(2010).gaussian((128, 8), dtype=np.float64)
    zero = frechet_proxy(feats, feats.copy())

    base = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    real = base * [2.0, 1.0] + [0.5, 0.0]
    fake = base * [1.0, 3.0] + [0.0, -1.0]
    mu_r, mu_f = real.mean(axis=0), fake.mean(axis=0)
    sig_r, sig_f = np.cov(real, rowvar=False), np.cov(fake, rowvar=False)
    closed_form = float(((mu_r - mu_f) ** 2).sum() + np.trace(sig_r) + np.trace(sig_f)
                        - 2.0 * np.sqrt(np.diag(sig_r) * np.diag(sig_f)).sum())
    err = abs(frechet_proxy(real, fake) - closed_form)
    check("8", "matches the closed-form Gaussian distance and is zero on identical sets",
          zero < 1e-6 and err < 1e-6, f"zero={zero:.2e} closed-form err={err:.2e}")


class _NoiseSampler:
    def continue_video(self, cond, num_new, seed):
        shape = (cond.shape[0], num_new, *cond.shape[2:])
        return RngStream(seed).uniform(shape).astype(np.float32)


def test_criterion_9_protocol_structure(bouncing_data):
    _, test = bouncing_data
    standard = eval_protocol_standard(_NoiseSampler(), test, clips_per_condition=5,
                                      max_test_clips=12, seed=7)
    windows = []

    class Recorder(_NoiseSampler):
        def continue_video(self, cond, num_new, seed):
            windows.append(cond.copy())
            return super().continue_video(cond, num_new, seed)

    debiased = eval_protocol_debiased(Recorder(), test, repeats=4, max_test_clips=12,
                                      gen_len=4, seed=8)
    redraws = any(not np.array_equal(windows[0][i], windows[1][i]) for i in range(12))
    ok = (standard.fake_clips == 12 * 5 and debiased.fake_clips == 12 * 4
          and len(windows) == 4 and redraws)
    check("9", "standard protocol emits test_clips x M fakes; debiased re-draws windows",
          ok, f"standard fakes {standard.fake_clips}, debiased fakes {debiased.fake_clips}")


def test_criterion_10_next_group_speed_and_finetune(ablation_models, group2_model):
    model = group2_model["model"]
    cond = np.full((1, 1, 16, 16, 1), 0.3, dtype=np.float32)
    fps = {}
    for group in (1, 2):
        settings = SampleSettings(decode_steps=6, scales=GuidanceScales(1, 1),
                                  aug=AugmentConfig(), group=group)
        times = []
        for run in range(6):
            start = time.perf_counter()
            rollout_batch(model, cond, 6, settings, seed=2011 + run)
            times.append(time.perf_counter() - start)
        fps[group] = 6.0 / float(np.median(times[1:]))
    speedup = fps[2] / fps[1]

    base_loss = ablation_models["canvas"]["canvas_loss"]
    tuned_loss = group2_model["canvas_loss"]
    budget_ok = FINETUNE_STEPS <= 0.15 * ABLATION_STEPS
    loss_ok = tuned_loss <= 1.10 * base_loss
    check("10", "group-2 decoding is >=1.2x faster at batch 1; finetune reaches base loss in 15% budget",
          speedup >= 1.2 and budget_ok and loss_ok,
          f"speedup {speedup:.2f}x, canvas loss {tuned_loss:.4f} vs base {base_loss:.4f}")


def test_criterion_11_determinism_and_persistence(coinflip_model, tmp_path):
    model = coinflip_model["model"]
    cond = coinflip_model["data"][:2, :1]
    settings = SampleSettings(decode_steps=6, scales=GuidanceScales(2.0, 1.1),
                              aug=AugmentConfig(), group=1)
    a = rollout_batch(model, cond, 1, settings, seed=2012)
    b = rollout_batch(model, cond, 1, settings, seed=2012)
    rollout_identical = np.array_equal(a, b)

    path = tmp_path / "model.cmar"
    save_checkpoint(path, model, coinflip_model["opt"])
    loaded, _, _ = load_checkpoint(path)
    tokens = patchify_array(coinflip_model["data"][:2, :2], model.cfg.patch)
    forward_identical = np.array_equal(model.temporal.forward_full(tokens).data,
                                       loaded.temporal.forward_full(tokens).data)
    c = rollout_batch(loaded, cond, 1, settings, seed=2012)
    reload_identical = np.array_equal(a, c)
    check("11", "seeded rollouts bit-identical; checkpoint round-trip preserves outputs bitwise",
          rollout_identical and forward_identical and reload_identical,
          f"rollout={rollout_identical} forward={forward_identical} reload={reload_identical}")


def test_extra_debiased_protocol_seed_stability(ablation_models, bouncing_data):
    _, test = bouncing_data
    model = ablation_models["canvas"]["model"]
    settings = SampleSettings(decode_steps=3, scales=GuidanceScales(1, 1),
                              aug=AugmentConfig(), group=1)
    embedder = FeatureEmbedder(channels=1, seed=99)
    scores = []
    for seed in (600, 601):
        result = eval_protocol_debiased(Sampler(model, settings), test, repeats=8,
                                        max_test_clips=24, gen_len=4,
                                        embedder=embedder, seed=seed)
        scores.append(result.score)
    spread = abs(scores[0] - scores[1]) / max(scores)
    assert spread < 0.20, f"protocol-seed spread {spread:.2%} ({scores})"
