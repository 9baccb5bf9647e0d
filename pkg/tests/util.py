"""Shared test helpers."""
import numpy as np

from canvid.autodiff import Tensor, finite_diff_check


def resolve_param(root, dotted: str):
    """Walk a dotted parameter path ('blocks.0.attn.wq.w') to (holder, attr)."""
    parts = dotted.split(".")
    node = root
    for part in parts[:-1]:
        node = node[int(part)] if part.isdigit() else getattr(node, part)
    return node, parts[-1]


def param_finite_diff(root, dotted: str, build_loss, eps: float = 1e-3) -> float:
    """finite_diff_check of a loss with respect to one named parameter.

    Temporarily swaps the parameter tensor for the probe while the loss is
    rebuilt, so the tape sees the probe as a leaf.
    """
    holder, attr = resolve_param(root, dotted)
    orig = getattr(holder, attr)

    def f(probe: Tensor) -> Tensor:
        setattr(holder, attr, probe)
        try:
            return build_loss()
        finally:
            setattr(holder, attr, orig)

    return finite_diff_check(f, orig, eps)


def frames_to_grids(video: np.ndarray, patch: int):
    from canvid.blocks import TokenGrid, patchify_array
    return [TokenGrid(patchify_array(video[i], patch), i) for i in range(video.shape[0])]


def cast_params_float64(module) -> None:
    """Shadow-precision mode: rebind every parameter to float64 in place."""
    for p in module.named_params().values():
        data = p.data.astype(np.float64)
        data.setflags(write=False)
        p.data = data
