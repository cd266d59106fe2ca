"""Binary checkpoint format.

Layout (little-endian)::

    b"RENQ" | u32 version | u32 n | config text (n bytes, UTF-8)
    u32 entry count, then per entry:
        u16 n | name (n bytes) | u8 ndim | u64 dims[ndim] | f64 data[prod(dims)]

Entries are written in sorted name order so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RENQ"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, config_text: str, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(config_text, arrays))


def dumps(config_text: str, arrays: dict[str, np.ndarray]) -> bytes:
    cfg = config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8")
        if not np.all(np.isfinite(a)):
            raise CheckpointError(f"non-finite values in {name!r}")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)))
        parts.append(key)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def load(path) -> tuple[str, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def loads(buf: bytes) -> tuple[str, dict[str, np.ndarray]]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version, n = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    config_text = bytes(take(n)).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        name = bytes(take(klen)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(bytes(take(8 * size)), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint entries")
    return config_text, arrays


def rng_to_array(rng: np.random.Generator) -> np.ndarray:
    """PCG64 state as 32-bit chunks stored exactly in float64."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError("only PCG64 generators can be checkpointed")
    vals = []
    for big in (st["state"]["state"], st["state"]["inc"]):
        vals.extend((big >> (32 * k)) & 0xFFFFFFFF for k in range(4))
    vals.append(st["has_uint32"])
    vals.append(st["uinteger"])
    return np.array(vals, dtype=np.float64)


def rng_from_array(arr: np.ndarray) -> np.random.Generator:
    v = [int(x) for x in arr]
    state = sum(v[k] << (32 * k) for k in range(4))
    inc = sum(v[4 + k] << (32 * k) for k in range(4))
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64", "state": {"state": state, "inc": inc},
                "has_uint32": v[8], "uinteger": v[9]}
    return np.random.Generator(bg)
