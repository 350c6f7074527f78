"""Versioned little-endian binary tensor container.

Layout::

    b"MLT1" | u32 count | count x (u16 name_len, name, u8 dtype, u8 ndim, ndim x u64 dim)
    | payloads, row-major, in header order

Checkpoints prefix the container with ``b"MLTC" | u32 format_version``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MLT1"
CKPT_MAGIC = b"MLTC"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def _normalise(arr) -> np.ndarray:
    # np.require keeps 0-d arrays 0-d, unlike ascontiguousarray
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return np.require(arr, dtype="<f8", requirements="C")
    if arr.dtype.kind in "iub" and arr.dtype != np.uint8:
        return np.require(arr, dtype="<i8", requirements="C")
    if arr.dtype == np.uint8:
        return np.require(arr, requirements="C")
    raise FormatError(f"unsupported dtype {arr.dtype}")


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    arrays = [(name, _normalise(a)) for name, a in tensors.items()]
    head = [MAGIC, struct.pack("<I", len(arrays))]
    for name, a in arrays:
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
        head.append(struct.pack("<BB", _CODES[a.dtype], a.ndim))
        head.append(struct.pack(f"<{a.ndim}Q", *a.shape))
    return b"".join(head + [a.tobytes(order="C") for _, a in arrays])


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError("not an MLT1 container")
    try:
        return _parse(buf)
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt container: {exc}") from exc


def _parse(buf: bytes) -> dict[str, np.ndarray]:
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    specs = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2 : pos + 2 + n].decode("utf-8")
        pos += 2 + n
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        specs.append((name, _DTYPES[code], shape))
    out = {}
    for name, dt, shape in specs:
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(buf):
        raise FormatError("trailing bytes after container payload")
    return out


def save(path: str | Path, tensors: dict[str, np.ndarray]) -> bytes:
    data = dumps(tensors)
    Path(path).write_bytes(data)
    return data


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def save_body(path, body, topo=None) -> None:
    """Persist a RestBody (and optionally its Topology) for reproducibility."""
    t = {f"body/{k}": v for k, v in body.tensors().items()}
    t["body/preset"] = np.frombuffer(body.preset.encode(), dtype=np.uint8)
    if topo is not None:
        t.update({f"topology/{k}": v for k, v in topo.tensors().items()})
    save(path, t)


def load_body(path):
    from .body_model import RestBody
    from .topology import Topology

    t = load(path)
    preset = t.pop("body/preset").tobytes().decode()
    body = RestBody.from_tensors(preset, {k[5:]: v for k, v in t.items() if k.startswith("body/")})
    topo_t = {k[9:]: v for k, v in t.items() if k.startswith("topology/")}
    return body, (Topology.from_tensors(topo_t) if topo_t else None)
