"""Binary checkpoint format.

Layout: magic "SBD1", u32 format version, u32 JSON header length, the JSON
header (model config echo, training step, rng state), u32 tensor count, then
per tensor: u16 name length, name bytes, u8 ndim, u32 dims, raw 32-bit
little-endian floats. Tensors are written in sorted-name order so identical
runs produce byte-identical files.
"""

import json
import struct

import numpy as np

from .model import DenoiserConfig, DenoiserModel

MAGIC = b"SBD1"
VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def save_checkpoint(path, model, step=0, rng_state=None):
    header = {
        "model": model.config.to_dict(),
        "step": int(step),
        "rng_state": _jsonable(rng_state) if rng_state is not None else None,
    }
    hj = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = model.params.state_arrays()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(hj)))
        f.write(hj)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(n_tensors):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(
                f.read(4 * count), dtype="<f4").reshape(shape)
    return header, arrays


def load_model(path, dtype=np.float32):
    """Rebuild a model from a checkpoint; forward outputs match the saved
    model bit-exactly at matching precision."""
    header, arrays = load_checkpoint(path)
    config = DenoiserConfig(**header["model"])
    model = DenoiserModel(config, seed=0, dtype=dtype)
    model.params.load_arrays(arrays)
    return model, header
