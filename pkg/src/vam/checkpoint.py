"""Binary checkpoint format.

Layout: magic "VAMCKPT1", u32 little-endian manifest length, JSON manifest
(a list of {name, shape, offset} with offsets relative to the start of the
data region), then raw little-endian float32 blobs in manifest order.
Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"VAMCKPT1"


def save_checkpoint(path, named_arrays):
    """named_arrays: iterable of (name, ndarray); values are stored as float32."""
    manifest = []
    blobs = []
    offset = 0
    for name, arr in named_arrays:
        if hasattr(arr, "data") and not isinstance(arr, np.ndarray):
            arr = arr.data
        data = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += len(blobs[-1])
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns an ordered dict name -> float32 ndarray."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (n,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(n).decode("utf-8"))
        data = f.read()
    out = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).copy()
    return out


def save_model(path, model):
    save_checkpoint(path, model.named_parameters())


def load_model(path, model):
    """Load parameters into an already-constructed model; shapes must agree."""
    state = load_checkpoint(path)
    model.load_state_dict(state)


def save_train_state(path, model, optimizer):
    entries = list(model.named_parameters()) + optimizer.state_arrays()
    save_checkpoint(path, entries)


def load_train_state(path, model, optimizer):
    state = load_checkpoint(path)
    params = {k: v for k, v in state.items() if not k.startswith("optim.")}
    model.load_state_dict(params)
    optimizer.load_state_arrays(state)
