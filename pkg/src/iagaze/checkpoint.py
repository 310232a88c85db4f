"""Checkpoint archives: a zip holding ``config.json`` plus one binary per tensor.

Tensor files use the heatmap container idea generalized to N-d: magic
``IGHT``, u32 dtype code (0 = float32, 1 = float64), u32 ndim, ndim x u32
dims, then row-major little-endian values. Model weights keep the dtype they
were trained in, so double-precision runs resume bit-for-bit.
"""
from __future__ import annotations

import io
import json
import struct
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ValidationError
from .model import IAConfig, build_model

TENSOR_MAGIC = b"IGHT"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def tensor_to_bytes(t) -> bytes:
    a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    code = _CODES.get(a.dtype)
    if code is None:
        a, code = a.astype(np.float32), 0
    head = TENSOR_MAGIC + struct.pack("<II", code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()


def tensor_from_bytes(buf: bytes) -> torch.Tensor:
    if buf[:4] != TENSOR_MAGIC:
        raise ValidationError("not an IGHT tensor record")
    code, ndim = struct.unpack("<II", buf[4:12])
    shape = struct.unpack(f"<{ndim}I", buf[12:12 + 4 * ndim])
    arr = np.frombuffer(buf[12 + 4 * ndim:], dtype=_DTYPES[code]).reshape(shape)
    return torch.from_numpy(arr.astype(_DTYPES[code].newbyteorder("=")))


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    # fixed timestamp keeps archives byte-identical across runs
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(path, model, meta: dict | None = None, optimizer=None) -> None:
    """Write model config, parameters, buffers and (optionally) optimizer moments."""
    meta = dict(meta or {})
    state = model.state_dict()
    counters = {k: int(v) for k, v in state.items() if v.dtype == torch.int64}
    header = {"config": model.cfg.to_dict(), "meta": meta, "counters": counters,
              "tensors": [k for k, v in state.items() if v.dtype != torch.int64]}
    names = {id(p): n for n, p in model.named_parameters()}
    optim_tensors = {}
    if optimizer is not None:
        opt_state = {}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                opt_state[n] = {"step": float(st["step"])}
                optim_tensors[f"{n}.exp_avg"] = st["exp_avg"]
                optim_tensors[f"{n}.exp_avg_sq"] = st["exp_avg_sq"]
        header["optimizer"] = {"state": opt_state, "lrs": [g["lr"] for g in optimizer.param_groups]}
    tmp = Path(str(path) + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(zf, "config.json", json.dumps(header, indent=2, sort_keys=True).encode())
        for k in header["tensors"]:
            _write_entry(zf, f"tensors/{k}", tensor_to_bytes(state[k]))
        for k, v in optim_tensors.items():
            _write_entry(zf, f"optim/{k}", tensor_to_bytes(v))
    tmp.replace(path)


def read_header(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("config.json"))


def load_checkpoint(path, expect_config: IAConfig | None = None, optimizer_factory=None):
    """Rebuild the model from an archive.

    Returns ``(model, meta, optimizer)``; ``optimizer`` is ``None`` unless
    ``optimizer_factory(model)`` is given and the archive carries moments.
    Raises :class:`ConfigError` when ``expect_config`` differs from the stored one.
    """
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("config.json"))
        cfg = IAConfig(**header["config"])
        if expect_config is not None and expect_config.to_dict() != cfg.to_dict():
            diff = {k: (v, cfg.to_dict()[k]) for k, v in expect_config.to_dict().items() if cfg.to_dict()[k] != v}
            raise ConfigError(f"checkpoint config mismatch (expected, stored): {diff}")
        tensors = {k: tensor_from_bytes(zf.read(f"tensors/{k}")) for k in header["tensors"]}
        dtype = next(iter(tensors.values())).dtype if tensors else torch.float32
        model = build_model(cfg, dtype=dtype)
        state = dict(tensors)
        state.update({k: torch.tensor(v) for k, v in header["counters"].items()})
        model.load_state_dict(state)
        optimizer = None
        if optimizer_factory is not None and "optimizer" in header:
            optimizer = optimizer_factory(model)
            params = dict(model.named_parameters())
            for n, st in header["optimizer"]["state"].items():
                p = params[n]
                optimizer.state[p] = {
                    "step": torch.tensor(st["step"]),
                    "exp_avg": tensor_from_bytes(zf.read(f"optim/{n}.exp_avg")),
                    "exp_avg_sq": tensor_from_bytes(zf.read(f"optim/{n}.exp_avg_sq")),
                }
            for g, lr in zip(optimizer.param_groups, header["optimizer"]["lrs"]):
                g["lr"] = lr
    return model, header["meta"], optimizer
