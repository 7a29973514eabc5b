"""Binary checkpoint format.

Layout: magic b"DRFN", u32 LE format version, u64 LE header length, JSON
header (config, named entries with byte offsets and shapes, optional Adam
state), then raw little-endian f64 blobs. Saving is deterministic, so
save -> load -> save round-trips byte-identically.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import (CheckpointIncompatibleError, ModelConfig,
                    SegmentationNetwork)

MAGIC = b"DRFN"
VERSION = 1


class UnsupportedVersionError(Exception):
    pass


def _state_entries(model):
    for name, p in model.named_parameters():
        yield name, "param", p.data, p.trainable
    for name, b in model.named_buffers():
        yield name, "buffer", b, True


def save_checkpoint(model, path, optimizer=None):
    entries = []
    blobs = []
    offset = 0
    for name, kind, arr, trainable in _state_entries(model):
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "kind": kind,
                        "shape": list(arr.shape), "offset": offset,
                        "trainable": bool(trainable)})
        blobs.append(data.tobytes())
        offset += data.nbytes
    adam = None
    if optimizer is not None:
        adam = {"lr": optimizer.lr, "beta1": optimizer.beta1,
                "beta2": optimizer.beta2, "eps": optimizer.eps,
                "t": optimizer.t, "entries": []}
        for name in sorted(optimizer.state):
            m, v = optimizer.state[name]
            for tag, arr in (("m", m), ("v", v)):
                data = np.ascontiguousarray(arr, dtype="<f8")
                adam["entries"].append({"name": name, "tag": tag,
                                        "shape": list(arr.shape),
                                        "offset": offset})
                blobs.append(data.tobytes())
                offset += data.nbytes
    header = json.dumps(
        {"format_version": VERSION, "config": model.config.to_dict(),
         "entries": entries, "adam": adam},
        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def read_checkpoint(path):
    """Returns (header dict, raw data bytes)."""
    try:
        f = open(path, "rb")
    except FileNotFoundError:
        raise
    with f:
        if f.read(4) != MAGIC:
            raise CheckpointIncompatibleError(f"{path}: bad magic bytes")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise UnsupportedVersionError(
                f"{path}: format version {version} not supported "
                f"(expected {VERSION})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        data = f.read()
    return header, data


def _extract(entry, data):
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    start = entry["offset"]
    arr = np.frombuffer(data, dtype="<f8", count=count, offset=start)
    return arr.reshape(shape).astype(np.float64)


def load_state(model, header, data):
    """Copy checkpoint values into an existing, structurally matching model."""
    by_name = {e["name"]: e for e in header["entries"]}
    for name, kind, arr, _ in _state_entries(model):
        if name not in by_name:
            raise CheckpointIncompatibleError(
                f"checkpoint missing entry {name!r}")
        entry = by_name.pop(name)
        value = _extract(entry, data)
        if value.shape != arr.shape:
            raise CheckpointIncompatibleError(
                f"shape mismatch for {name!r}: checkpoint "
                f"{value.shape}, model {tuple(arr.shape)}")
        arr[...] = value
    if by_name:
        name = sorted(by_name)[0]
        raise CheckpointIncompatibleError(
            f"checkpoint entry {name!r} not present in model")


def load_checkpoint(path, optimizer_cls=None):
    """Rebuild the model (and optionally its Adam state) from a file."""
    header, data = read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    model = SegmentationNetwork(config, seed=0)
    load_state(model, header, data)
    for name, p in model.named_parameters():
        entry = next(e for e in header["entries"] if e["name"] == name)
        p.trainable = entry.get("trainable", True)
    for m in model.modules():
        from . import nn
        if isinstance(m, nn.BatchNorm2d) and all(
                not p.trainable for p in m._params.values()):
            m.frozen = True
    optimizer = None
    if optimizer_cls is not None and header.get("adam"):
        a = header["adam"]
        optimizer = optimizer_cls(lr=a["lr"], beta1=a["beta1"],
                                  beta2=a["beta2"], eps=a["eps"])
        optimizer.t = a["t"]
        pairs = {}
        for e in a["entries"]:
            pairs.setdefault(e["name"], {})[e["tag"]] = _extract(e, data)
        optimizer.state = {k: (v["m"], v["v"]) for k, v in pairs.items()}
    return model, optimizer
