"""SYNP binary checkpoints.

Layout (little-endian)::

    b"SYNP"  u32 version  u32 record_count
    record*: u32 name_len, name (UTF-8), u8 dtype tag, u32 rank,
             u32 extents[rank], u64 nbytes, raw data

Tags: 0 float32, 1 float64, 2 uint8, 3 bitset (LSB-first packed booleans),
4 int64.  ``__meta__`` is a uint8 record holding JSON (layer spec, variant,
free-form metadata).  Masks are ``mask/<layer>`` bitsets; a stored prune
plan adds ``plan/<layer>`` bitsets of pruned kernels.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import Network

MAGIC = b"SYNP"
VERSION = 1
F32, F64, U8, BITS, I64 = 0, 1, 2, 3, 4
_DTYPES = {F32: "<f4", F64: "<f8", U8: "u1", I64: "<i8"}


def _record(name: str, arr: np.ndarray, tag: int | None = None) -> bytes:
    arr = np.asarray(arr)
    if tag is None:
        tag = {np.dtype(np.float32): F32, np.dtype(np.float64): F64, np.dtype(np.uint8): U8,
               np.dtype(np.int64): I64, np.dtype(bool): BITS}[arr.dtype]
    if tag == BITS:
        data = np.packbits(arr.astype(bool).ravel(), bitorder="little").tobytes()
    else:
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<Q", len(data)) + data


def write_records(path, records: dict[str, np.ndarray]) -> None:
    body = b"".join(_record(k, v) for k, v in records.items())
    Path(path).write_bytes(MAGIC + struct.pack("<II", VERSION, len(records)) + body)


def read_records(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a SYNP checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported SYNP version {version}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BI", buf, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            (nbytes,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            raw = buf[pos:pos + nbytes]
            if len(raw) != nbytes:
                raise ValueError(f"{path}: truncated record {name!r}")
            pos += nbytes
            if tag == BITS:
                size = int(np.prod(shape)) if shape else 1
                arr = np.unpackbits(np.frombuffer(raw, np.uint8), count=size, bitorder="little")
                out[name] = arr.astype(bool).reshape(shape)
            else:
                out[name] = np.frombuffer(raw, _DTYPES[tag]).reshape(shape).copy()
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out


def save_checkpoint(net: Network, path, meta: dict | None = None, plan=None) -> None:
    info = {"spec": net.spec, "variant": net.variant, "meta": meta or {}}
    bn = next((m for m in net.modules() if hasattr(m, "running_var")), None)
    if bn is not None:
        info["bn_momentum"], info["bn_eps"] = bn.momentum, bn.eps
    records: dict[str, np.ndarray] = {}
    if plan is not None:
        info["plan"] = {"kind": plan.kind, "target_sparsity": plan.target_sparsity,
                        "threshold": plan.threshold, "total": plan.total}
    records["__meta__"] = np.frombuffer(json.dumps(info, sort_keys=True).encode("utf-8"), np.uint8)
    records.update(net.state_dict())
    for name, mask in net.masks().items():
        records[f"mask/{name}"] = mask.astype(bool)
    if plan is not None:
        for name, mask in plan.masks_for(net).items():
            records[f"plan/{name}"] = ~mask
    write_records(path, records)


def load_checkpoint(path) -> tuple[Network, dict]:
    """Rebuild the network; returns it with the decoded ``__meta__`` dict."""
    records = read_records(path)
    info = json.loads(records.pop("__meta__").tobytes().decode("utf-8"))
    params = {k: v for k, v in records.items() if "/" not in k}
    dtype = next(iter(params.values())).dtype
    net = Network(info["spec"], info["variant"], bn_momentum=info.get("bn_momentum", 0.9),
                  bn_eps=info.get("bn_eps", 1e-5), dtype=dtype)
    net.load_state_dict(params)
    for conv, _ in net.conv_layers():
        conv.mask = records[f"mask/{conv.name}"].copy()
    info["plan_masks"] = {k[5:]: v for k, v in records.items() if k.startswith("plan/")}
    return net, info
