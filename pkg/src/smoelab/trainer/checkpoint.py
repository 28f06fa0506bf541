"""Binary checkpoints.

Layout (little-endian)::

    b"SMOECL01" | u32 version | 32-byte config digest | u32 array count
    per array: u16 name length | name (utf-8) | u8 dtype code | u8 ndim
               | u32 dims[ndim] | raw values
    u32 crc32 of everything above

Learnable parameters are named ``param:<name>``, running statistics
(routing biases, centroids) ``state:<name>``, optimizer moments
``adam.m:<name>`` / ``adam.v:<name>``; ``meta:step`` and ``meta:adam_step``
hold counters.
"""
from __future__ import annotations

import io
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SMOECL01"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_CODES = {np.dtype("float32"): 0, np.dtype("int32"): 1}


class CheckpointError(ValueError):
    pass


class IncompatibleCheckpoint(CheckpointError):
    pass


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def save_arrays(path, arrays: dict[str, np.ndarray], digest: bytes):
    if len(digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    body = MAGIC + struct.pack("<I", VERSION) + digest + _pack_arrays(arrays)
    data = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_arrays(path, expected_digest: bytes | None = None):
    """Returns ``(digest, arrays)``; raises before returning anything on a bad file."""
    data = Path(path).read_bytes()
    if len(data) < 8 + 4 + 32 + 4 + 4 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated header)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise IncompatibleCheckpoint(f"{path}: format version {version}, expected {VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    digest = data[12:44]
    if expected_digest is not None and digest != expected_digest:
        raise IncompatibleCheckpoint(
            f"{path}: config digest {digest.hex()[:16]}... does not match {expected_digest.hex()[:16]}..."
        )
    pos = 44
    end = len(data) - 4
    try:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > end:
                raise CheckpointError(f"{path}: array {name!r} runs past end of file")
            arrays[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    if pos != end:
        raise CheckpointError(f"{path}: {end - pos} trailing bytes")
    return digest, arrays


def checkpoint_save(path, model, optimizer, step: int, digest: bytes):
    arrays = {}
    for k, v in model.learnable().items():
        arrays[f"param:{k}"] = v
    for k, v in model.running_state().items():
        arrays[f"state:{k}"] = v
    for k in model.learnable():
        arrays[f"adam.m:{k}"] = optimizer.m[k]
        arrays[f"adam.v:{k}"] = optimizer.v[k]
    arrays["meta:step"] = np.array([step], dtype=np.int32)
    arrays["meta:adam_step"] = np.array([optimizer.step], dtype=np.int32)
    save_arrays(path, arrays, digest)


def checkpoint_load(path, model, optimizer=None, digest: bytes | None = None) -> int:
    """Load into ``model`` (and ``optimizer``) in place; returns the step.

    Everything is validated before any array is written.
    """
    _, arrays = load_arrays(path, digest)

    def section(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    params, state = section("param:"), section("state:")
    if set(params) != set(model.learnable()) or set(state) != set(model.running_state()):
        raise IncompatibleCheckpoint(f"{path}: array names do not match the model layout")
    for name, arr in {**model.learnable(), **model.running_state()}.items():
        src = params.get(name, state.get(name))
        if src.shape != arr.shape:
            raise IncompatibleCheckpoint(f"{path}: {name} has shape {src.shape}, model expects {arr.shape}")
    if optimizer is not None:
        m, v = section("adam.m:"), section("adam.v:")
        if set(m) != set(params) or set(v) != set(params):
            raise IncompatibleCheckpoint(f"{path}: optimizer state does not match parameters")
    model.load_arrays(params, state)
    if optimizer is not None:
        optimizer.m = {k: m[k].copy() for k in model.learnable()}
        optimizer.v = {k: v[k].copy() for k in model.learnable()}
        optimizer.step = int(arrays["meta:adam_step"][0])
    return int(arrays["meta:step"][0])
