"""Binary checkpoint format.

Layout (little-endian): magic "CMAR", u32 version, u32 config-blob length,
the model config as flat key=value text, then per-tensor records of
(u32 name length, name bytes, u32 rank, u32 dims..., float32 payload).
Parameters, optimizer moments and the step counter all ride as tensors.
"""
from __future__ import annotations

import io
import struct

import numpy as np

from .config import format_flat, parse_flat
from .model import ModelConfig, VideoModel
from .optim import OptState

MAGIC = b"CMAR"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _write_tensor(buf: io.BufferedWriter, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype=np.float32)
    nb = name.encode()
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<I", data.ndim))
    buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
    buf.write(data.tobytes(order="C"))


def _read_exact(buf, count: int) -> bytes:
    data = buf.read(count)
    if len(data) != count:
        raise CheckpointError("checkpoint file is truncated")
    return data


def _read_tensor(buf) -> tuple[str, np.ndarray] | None:
    head = buf.read(4)
    if len(head) == 0:
        return None
    if len(head) != 4:
        raise CheckpointError("checkpoint file is truncated")
    (name_len,) = struct.unpack("<I", head)
    name = _read_exact(buf, name_len).decode()
    (rank,) = struct.unpack("<I", _read_exact(buf, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(buf, 4 * count)
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return name, arr


def save_checkpoint(path, model: VideoModel, opt: OptState | None = None) -> None:
    cfg_text = format_flat(model.cfg.to_dict())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = cfg_text.encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, p in sorted(model.named_params().items()):
            _write_tensor(fh, f"param/{name}", p.data)
        if opt is not None:
            for name in sorted(opt.m):
                _write_tensor(fh, f"opt_m/{name}", opt.m[name])
                _write_tensor(fh, f"opt_v/{name}", opt.v[name])
            _write_tensor(fh, "meta/step", np.array([opt.step], dtype=np.float32))
            _write_tensor(fh, "meta/adam", np.array([opt.lr, opt.beta1, opt.beta2, opt.eps],
                                                    dtype=np.float32))


def load_checkpoint(path, expected_config: ModelConfig | None = None,
                    ) -> tuple[VideoModel, OptState | None, int]:
    """Rebuild the model (and optimizer state, if present) from a file.

    If `expected_config` is given, any differing field is reported by name.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4))
        cfg = ModelConfig.from_dict(parse_flat(_read_exact(fh, blob_len).decode(),
                                               ModelConfig().to_dict()))
        if expected_config is not None:
            for key, val in expected_config.to_dict().items():
                have = getattr(cfg, key)
                if have != val:
                    raise CheckpointError(f"config mismatch on field '{key}': checkpoint has {have},"
                                          f" expected {val}")
        tensors: dict[str, np.ndarray] = {}
        while True:
            rec = _read_tensor(fh)
            if rec is None:
                break
            tensors[rec[0]] = rec[1]

    model = VideoModel(cfg, seed=0)
    params = model.named_params()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor '{key}'")
        if tensors[key].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for '{key}': {tensors[key].shape} vs {p.data.shape}")
        p.assign(tensors[key])

    opt = None
    step = 0
    if "meta/step" in tensors:
        step = int(tensors["meta/step"][0])
        lr, b1, b2, eps = (float(x) for x in tensors["meta/adam"])
        opt = OptState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
        for name in params:
            opt.m[name] = tensors[f"opt_m/{name}"]
            opt.v[name] = tensors[f"opt_v/{name}"]
    return model, opt, step
