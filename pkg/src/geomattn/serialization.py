"""Checkpoint container: named float64 tensors in a flat binary file.

Layout: the 5-byte magic ``GATN1``, then one record per tensor until end of
file. Each record is

    u32 name_len | name (UTF-8) | u32 rank | u32 x rank dims | float64 values

with all integers little-endian and values in C order. Record order follows
dict insertion order, so writes are byte-for-byte reproducible.

Model checkpoints store every parameter plus each batch-norm layer's running
statistics under ``<layer>/running_mean``, ``/running_var`` and
``/running_count``, and carry the architecture in a JSON sidecar next to the
file (``<path>.arch.json``) so a checkpoint is self-describing. The same
container serves for attention-mask float sidecars and exported feature
tables.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from geomattn.model import ArchConfig, ThreeBranchNet

__all__ = [
    "save_tensors",
    "load_tensors",
    "save_checkpoint",
    "load_checkpoint",
    "arch_sidecar_path",
]

_MAGIC = b"GATN1"


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a tensor container (magic {magic!r})")
        out: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if head == b"":
                return out
            if len(head) != 4:
                raise ValueError(f"{path}: truncated record header")
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(shape)) if rank else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated values for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def arch_sidecar_path(ckpt_path) -> str:
    return f"{ckpt_path}.arch.json"


def _model_record(model: ThreeBranchNet) -> dict[str, np.ndarray]:
    record: dict[str, np.ndarray] = {}
    for name, p in model.parameters().items():
        record[name] = p.data
    for name, stats in model.stats().items():
        base = name.rsplit("/", 1)[0]  # ".../bn/stats" -> ".../bn"
        record[f"{base}/running_mean"] = stats.mean
        record[f"{base}/running_var"] = stats.var
        record[f"{base}/running_count"] = np.asarray(float(stats.count))
    return record


def save_checkpoint(path, model: ThreeBranchNet) -> None:
    save_tensors(path, _model_record(model))
    sidecar = {"arch": model.cfg.to_dict(), "format": _MAGIC.decode("ascii")}
    with open(arch_sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(path) -> ThreeBranchNet:
    sidecar_path = arch_sidecar_path(path)
    if not os.path.exists(sidecar_path):
        raise FileNotFoundError(f"missing architecture sidecar {sidecar_path}")
    with open(sidecar_path) as fh:
        cfg = ArchConfig.from_dict(json.load(fh)["arch"])
    model = ThreeBranchNet(cfg, np.random.default_rng(0))
    record = load_tensors(path)

    expected = _model_record(model)
    missing = sorted(set(expected) - set(record))
    unknown = sorted(set(record) - set(expected))
    if missing or unknown:
        raise ValueError(f"{path}: checkpoint mismatch; missing {missing}, unknown {unknown}")

    params = model.parameters()
    for name, p in params.items():
        if record[name].shape != p.data.shape:
            raise ValueError(
                f"{path}: shape mismatch for {name}: {record[name].shape} vs {p.data.shape}"
            )
        p.data[...] = record[name]
    for name, stats in model.stats().items():
        base = name.rsplit("/", 1)[0]
        stats.mean = record[f"{base}/running_mean"].copy()
        stats.var = record[f"{base}/running_var"].copy()
        stats.count = int(record[f"{base}/running_count"].item())
    return model
