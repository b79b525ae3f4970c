"""Binary tensor container used for checkpoints and centroid blobs.

Layout (all little-endian):

    magic   4 bytes  b"PSSL"
    version u32
    count   u32
    per tensor:
        name_len u16, name utf-8
        rank     u8
        dims     rank * u32
        values   float32 * prod(dims)

Values are stored at float32 precision; loading returns float32 arrays so a
save/load round trip is bitwise stable after the first rounding.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"PSSL"
VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValidationError(f"tensor name too long: {name[:40]}...")
            a = np.asarray(arr, dtype=np.float32)  # tobytes() copies in C order
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<I", d))
            f.write(a.astype("<f4").tobytes(order="C"))


def load_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValidationError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<I", blob, 8)
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        a = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = a.astype(np.float32)
    if off != len(blob):
        raise ValidationError(f"{path}: {len(blob) - off} trailing bytes")
    return out


def encode_text(s: str) -> np.ndarray:
    """Store a utf-8 string as one float32 per byte (each value is exact)."""
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


def encode_uint(value: int, limbs: int) -> np.ndarray:
    """Split a non-negative int into 16-bit limbs (little-endian), exact in f32."""
    out = np.zeros(limbs, dtype=np.float32)
    v = int(value)
    for i in range(limbs):
        out[i] = v & 0xFFFF
        v >>= 16
    if v:
        raise ValidationError(f"value does not fit in {limbs} limbs")
    return out


def decode_uint(arr: np.ndarray) -> int:
    v = 0
    for i, limb in enumerate(np.asarray(arr, dtype=np.int64)):
        v |= int(limb) << (16 * i)
    return v


def encode_rng_state(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    inner = st["state"]
    parts = [
        encode_uint(inner["state"], 16),
        encode_uint(inner["inc"], 16),
        encode_uint(st["has_uint32"], 1),
        encode_uint(st["uinteger"], 2),
    ]
    return np.concatenate(parts)


def decode_rng_state(arr: np.ndarray) -> np.random.Generator:
    arr = np.asarray(arr)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": decode_uint(arr[:16]), "inc": decode_uint(arr[16:32])},
        "has_uint32": decode_uint(arr[32:33]),
        "uinteger": decode_uint(arr[33:35]),
    }
    return rng


def config_digest(text: str) -> np.ndarray:
    """First 8 bytes of sha256, as 16-bit limbs."""
    h = hashlib.sha256(text.encode("utf-8")).digest()[:8]
    return encode_uint(int.from_bytes(h, "little"), 4)
