"""Binary checkpoint format.

Layout: magic ``DCSN``, u32 format version, u32 block count, then per block
a length-prefixed UTF-8 name, u8 rank, u32 extents, and a float32
little-endian payload; finally a length-prefixed JSON training-state blob
(optimizer moments base64-encoded as raw float64, epoch, RNG states).

Parameters pass through float32 on disk; ``snap_module`` pushes a live
model onto the same float32 grid so save -> load round-trips are bit-exact.
"""

from __future__ import annotations

import base64
import json
import struct

import numpy as np

MAGIC = b"DCSN"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_array(obj: dict) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(obj["data"]), dtype=np.float64)
    return flat.reshape(obj["shape"]).copy()


def encode_state(state: dict) -> dict:
    """Recursively base64-encode ndarrays so the blob is valid JSON."""
    if isinstance(state, dict):
        return {k: encode_state(v) for k, v in state.items()}
    if isinstance(state, (list, tuple)):
        return [encode_state(v) for v in state]
    if isinstance(state, np.ndarray):
        return {"__array__": _encode_array(state)}
    if isinstance(state, (np.integer,)):
        return int(state)
    if isinstance(state, (np.floating,)):
        return float(state)
    return state


def decode_state(state):
    if isinstance(state, dict):
        if "__array__" in state:
            return _decode_array(state["__array__"])
        return {k: decode_state(v) for k, v in state.items()}
    if isinstance(state, list):
        return [decode_state(v) for v in state]
    return state


def write_checkpoint(path: str, blocks: dict[str, np.ndarray], state: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blocks)))
        for name, arr in blocks.items():
            # np.asarray keeps rank-0 blocks rank 0 (ascontiguousarray would
            # promote them to shape (1,))
            arr32 = np.asarray(arr, dtype=np.float32, order="C")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr32.ndim))
            fh.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
            fh.write(arr32.astype("<f4").tobytes())
        blob = json.dumps(encode_state(state)).encode("utf-8")
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def read_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (parameter blocks upcast to float64, training-state dict)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    blocks = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            blocks[name] = arr.astype(np.float64)
        (blen,) = struct.unpack_from("<Q", raw, off)
        off += 8
        state = decode_state(json.loads(raw[off:off + blen].decode("utf-8")))
    except (struct.error, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return blocks, state


def snap_array(arr: np.ndarray) -> np.ndarray:
    """Round-trip through float32, the on-disk representation."""
    return arr.astype(np.float32).astype(np.float64)


def snap_module(module):
    """Quantize a module's parameters and buffers to the on-disk grid in place."""
    for _, p in module.named_parameters():
        p.data = snap_array(p.data)
    for _, buf in module._named_buffers():
        buf[...] = snap_array(buf)
