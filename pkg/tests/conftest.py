"""Session fixtures: datasets and the trained models the acceptance suite
shares, plus a per-criterion pass/fail summary printed at the end."""
import os
import sys
import time

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

from canvid.data import SyntheticSpec, gen_bouncing, gen_coinflip
from canvid.model import ModelConfig, VideoModel
from canvid.optim import OptState
from canvid.rng import RngStream
from canvid.training import TrainSettings, train_loop

# ---------------------------------------------------------------------------
# budgets for the trained-model fixtures (shared by several criteria)
# ---------------------------------------------------------------------------

ABLATION_STEPS = 2000
FINETUNE_STEPS = 300  # 15% of the base budget
COINFLIP_STEPS = 800

ABLATION_SPEC = SyntheticSpec(kind="bouncing", frames=8, height=16, width=16,
                              num_shapes=2, velocity=1.5, seed=21)
ABLATION_TEST_SPEC = SyntheticSpec(kind="bouncing", frames=8, height=16, width=16,
                                   num_shapes=2, velocity=1.5, seed=777)
COINFLIP_SPEC = SyntheticSpec(kind="coinflip", frames=2, height=32, width=32,
                              velocity=2.0, seed=11)


def ablation_config(use_canvas: bool) -> ModelConfig:
    return ModelConfig(height=16, width=16, dim=64, flow_dim=128, flow_steps=30,
                       max_frames=16, use_canvas=use_canvas)


_RESULTS: list[tuple[str, str, bool, str]] = []


def record_criterion(criterion: str, label: str, passed: bool, detail: str = "") -> None:
    _RESULTS.append((criterion, label, passed, detail))


def check(criterion: str, label: str, passed: bool, detail: str = "") -> None:
    record_criterion(criterion, label, passed, detail)
    assert passed, f"criterion {criterion} ({label}): {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for criterion, label, passed, detail in _RESULTS:
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] criterion {criterion}: {label}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bouncing_data():
    train = gen_bouncing(ABLATION_SPEC, 384)
    test = gen_bouncing(ABLATION_TEST_SPEC, 24)
    return train, test


@pytest.fixture(scope="session")
def ablation_models(bouncing_data):
    """Canvas and no-canvas variants trained with identical budgets."""
    train, _ = bouncing_data
    out = {}
    for name, use_canvas in (("canvas", True), ("nocanvas", False)):
        model = VideoModel(ablation_config(use_canvas), seed=5)
        opt = OptState.for_params(model.named_params(), lr=1e-3)
        start = time.perf_counter()
        hist = train_loop(model, train, opt, TrainSettings(), steps=ABLATION_STEPS,
                          batch_size=8, clip_len=8, seed=100)
        out[name] = {
            "model": model,
            "opt": opt,
            "seconds": time.perf_counter() - start,
            "canvas_loss": float(np.mean([h["canvas_loss"] for h in hist[-50:]])),
            "history": hist,
        }
    return out


@pytest.fixture(scope="session")
def group2_model(ablation_models, bouncing_data):
    """The canvas model finetuned with a second canvas head."""
    train, _ = bouncing_data
    base = ablation_models["canvas"]
    model = VideoModel(ablation_config(True), seed=5)
    for name, p in model.named_params().items():
        p.assign(base["model"].named_params()[name].data)
    model.canvas.grow_heads(RngStream(1234), 2)
    model.cfg.group_size = 2
    opt = OptState.for_params(model.named_params(), lr=1e-3)
    start = time.perf_counter()
    hist = train_loop(model, train, opt, TrainSettings(warmup_steps=25),
                      steps=FINETUNE_STEPS, batch_size=8, clip_len=8, seed=321)
    return {
        "model": model,
        "seconds": time.perf_counter() - start,
        "canvas_loss": float(np.mean([h["canvas_loss"] for h in hist[-50:]])),
        "history": hist,
    }


@pytest.fixture(scope="session")
def coinflip_model():
    data = gen_coinflip(COINFLIP_SPEC, 512)
    model = VideoModel(ModelConfig(), seed=3)
    opt = OptState.for_params(model.named_params(), lr=1e-3)
    start = time.perf_counter()
    hist = train_loop(model, data, opt, TrainSettings(), steps=COINFLIP_STEPS,
                      batch_size=8, clip_len=2, seed=0)
    return {
        "model": model,
        "opt": opt,
        "seconds": time.perf_counter() - start,
        "history": hist,
        "data": data,
    }
