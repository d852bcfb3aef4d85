"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"X2DOSCKP"
    4 bytes   format version (uint32)
    8 bytes   header length H (uint64)
    H bytes   UTF-8 JSON header (sorted keys): config, epoch, rng, adam
              hyperparameters, and a manifest of (name, shape, offset)
    ...       raw float64 ('<f8') blobs; offsets count bytes from the end
              of the header

Blob names: ``param/<name>``, ``buffer/<name>/mean|var``,
``adam_m/<name>``, ``adam_v/<name>``.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .config import ConfigError, TrainConfig
from .model import Xtal2DoS
from .training import AdamState, Trainer

MAGIC = b"X2DOSCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _blobs(trainer: Trainer) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, p in trainer.model.parameters().items():
        out.append((f"param/{name}", p.data))
    for name, st in trainer.model.buffers().items():
        out.append((f"buffer/{name}/mean", st.mean))
        out.append((f"buffer/{name}/var", st.var))
    for name in trainer.model.parameters():
        out.append((f"adam_m/{name}", trainer.adam.m[name]))
        out.append((f"adam_v/{name}", trainer.adam.v[name]))
    return out


def to_bytes(trainer: Trainer) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in _blobs(trainer):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    a = trainer.adam
    header = {
        "format": "xtal2dos-checkpoint",
        "config": trainer.cfg.to_dict(),
        "epoch": trainer.epoch,
        "rng": {"algorithm": "PCG64", "seed": trainer.cfg.seed, "next_epoch": trainer.epoch},
        "adam": {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "t": a.t},
        "manifest": manifest,
        "data_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)


def save_checkpoint(path: str | os.PathLike, trainer: Trainer) -> None:
    data = to_bytes(trainer)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def from_bytes(data: bytes) -> Trainer:
    if len(data) < _PREFIX.size:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size + head_len
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    if header.get("format") != "xtal2dos-checkpoint":
        raise CheckpointError("header does not describe an xtal2dos checkpoint")
    if len(data) - start != header.get("data_bytes"):
        raise CheckpointError("blob section length does not match the header")
    arrays = {}
    for entry in header["manifest"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        lo = start + entry["offset"]
        hi = lo + 8 * count
        if hi > len(data):
            raise CheckpointError(f"blob {entry['name']} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(data[lo:hi], dtype="<f8").astype(np.float64).reshape(entry["shape"])

    try:
        cfg = TrainConfig.from_dict(header["config"])
        model = Xtal2DoS(cfg)
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"checkpoint config invalid: {exc}") from None
    params = model.parameters()
    expected = {f"param/{n}" for n in params}
    expected |= {f"buffer/{n}/{m}" for n in model.buffers() for m in ("mean", "var")}
    expected |= {f"adam_{k}/{n}" for n in params for k in ("m", "v")}
    if set(arrays) != expected:
        missing = sorted(expected - set(arrays))[:3]
        extra = sorted(set(arrays) - expected)[:3]
        raise CheckpointError(f"manifest mismatch (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        arr = arrays[f"param/{name}"]
        if arr.shape != p.shape:
            raise CheckpointError(f"parameter {name} has shape {arr.shape}, model expects {p.shape}")
    # everything validated; only now mutate the fresh model
    for name, p in params.items():
        p.data = arrays[f"param/{name}"].copy()
    for name, st in model.buffers().items():
        st.mean = arrays[f"buffer/{name}/mean"].copy()
        st.var = arrays[f"buffer/{name}/var"].copy()
    ah = header["adam"]
    adam = AdamState(lr=ah["lr"], beta1=ah["beta1"], beta2=ah["beta2"], eps=ah["eps"], t=ah["t"])
    for name in params:
        adam.m[name] = arrays[f"adam_m/{name}"].copy()
        adam.v[name] = arrays[f"adam_v/{name}"].copy()
    return Trainer(cfg, model=model, adam=adam, epoch=int(header["epoch"]))


def load_checkpoint(path: str | os.PathLike) -> Trainer:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return from_bytes(data)
