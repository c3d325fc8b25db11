"""Kernel-sparse inference: block-compressed rows, direct and Winograd convolution.

Each conv layer is stored filter-major: ``row_ptr[k]:row_ptr[k+1]`` indexes the
surviving kernels of filter ``k``; ``col_idx`` holds their input channels and
``blocks`` their folded (strength times unit direction) kh x kw values.

Winograd F(2x2, 3x3) uses the standard transforms::

    Y = A^T [ sum_c (G g G^T) * (B^T d B) ] A

and keeps exactly the same ``row_ptr`` / ``col_idx``: a pruned kernel is zero
in the transformed domain too.
"""
from __future__ import annotations

import csv
import io
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import scipy.sparse as sp

from .layers import BatchNorm2d, GlobalAvgPool, Linear, Network, ReLU, ReparamConv2d, Residual
from .tensor import _conv2d_forward, conv_output_shape

BT = np.array([[1, 0, -1, 0],
               [0, 1, 1, 0],
               [0, -1, 1, 0],
               [0, 1, 0, -1]], dtype=np.float64)
G = np.array([[1, 0, 0],
              [0.5, 0.5, 0.5],
              [0.5, -0.5, 0.5],
              [0, 0, 1]], dtype=np.float64)
AT = np.array([[1, 1, 1, 0],
               [0, 1, -1, -1]], dtype=np.float64)

MAGIC = b"SBCR"
VERSION = 1
TAG_CONV, TAG_BN, TAG_RELU, TAG_GAP, TAG_LINEAR, TAG_RESIDUAL = 1, 2, 3, 4, 5, 6

PATHS = ("dense", "direct", "winograd")


class UnsupportedGeometry(ValueError):
    pass


@dataclass
class BcsrLayer:
    name: str
    K: int
    C: int
    kh: int
    kw: int
    stride: int
    padding: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    blocks: np.ndarray

    def __post_init__(self):
        self.row_ptr = np.asarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.blocks = np.asarray(self.blocks, dtype=np.float32).reshape(-1, self.kh, self.kw)
        self.validate()

    @property
    def nnz_blocks(self) -> int:
        return len(self.col_idx)

    @property
    def density(self) -> float:
        return self.nnz_blocks / (self.K * self.C)

    def validate(self) -> None:
        rp = self.row_ptr
        if rp.shape != (self.K + 1,) or rp[0] != 0:
            raise ValueError(f"{self.name}: row_ptr must have K+1 entries starting at 0")
        if np.any(np.diff(rp) < 0):
            raise ValueError(f"{self.name}: row_ptr must be nondecreasing")
        if rp[-1] != len(self.col_idx) or len(self.col_idx) != len(self.blocks):
            raise ValueError(f"{self.name}: row_ptr[K], len(col_idx) and block count disagree")
        for k in range(self.K):
            cols = self.col_idx[rp[k]:rp[k + 1]]
            if np.any(np.diff(cols) <= 0):
                raise ValueError(f"{self.name}: col_idx not strictly increasing in row {k}")
            if cols.size and (cols[0] < 0 or cols[-1] >= self.C):
                raise ValueError(f"{self.name}: col_idx out of range in row {k}")
        if not np.all(np.isfinite(self.blocks)):
            raise ValueError(f"{self.name}: non-finite block values")

    @classmethod
    def from_dense(cls, kernels: np.ndarray, mask: np.ndarray | None = None, stride: int = 1,
                   padding: int = 0, name: str = "conv") -> "BcsrLayer":
        K, C, kh, kw = kernels.shape
        mask = np.ones((K, C), bool) if mask is None else np.asarray(mask, bool)
        ks, cs = np.nonzero(mask)
        row_ptr = np.zeros(K + 1, np.int64)
        np.cumsum(np.bincount(ks, minlength=K), out=row_ptr[1:])
        return cls(name, K, C, kh, kw, stride, padding, row_ptr, cs, kernels[ks, cs])

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.K, self.C, self.kh, self.kw), np.float32)
        rows = np.repeat(np.arange(self.K), np.diff(self.row_ptr))
        out[rows, self.col_idx] = self.blocks
        return out

    def mask(self) -> np.ndarray:
        m = np.zeros((self.K, self.C), bool)
        m[np.repeat(np.arange(self.K), np.diff(self.row_ptr)), self.col_idx] = True
        return m


@dataclass
class WinogradLayer:
    name: str
    K: int
    C: int
    padding: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    U: np.ndarray  # (nnz, 4, 4)
    stride: int = 1

    @property
    def nnz_blocks(self) -> int:
        return len(self.col_idx)


def winograd_kernel(k: np.ndarray) -> np.ndarray:
    """G k G^T for one or many 3x3 kernels (..., 3, 3) -> (..., 4, 4)."""
    return np.einsum("ij,...jk,lk->...il", G, np.asarray(k, np.float64), G)


def winograd_transform(layer: BcsrLayer) -> WinogradLayer:
    """Transform every surviving kernel; the sparsity structure is copied as is.

    Stride 2 is supported by evaluating the stride-1 tiling and keeping every
    second output, which is exact and leaves the block count unchanged.
    """
    if (layer.kh, layer.kw) != (3, 3) or layer.stride not in (1, 2):
        raise UnsupportedGeometry(f"{layer.name}: Winograd F(2x2,3x3) needs 3x3 kernels with stride 1 or 2, "
                                  f"got {layer.kh}x{layer.kw} stride {layer.stride}")
    U = winograd_kernel(layer.blocks).astype(np.float32)
    return WinogradLayer(layer.name, layer.K, layer.C, layer.padding, layer.row_ptr.copy(),
                         layer.col_idx.copy(), U, layer.stride)


# ---------------------------------------------------------------------------
# convolution paths
# ---------------------------------------------------------------------------

def _check_channels(x: np.ndarray, C: int, name: str) -> None:
    if x.ndim != 4 or x.shape[1] != C:
        raise ValueError(f"{name}: expected (N, {C}, H, W) input, got {x.shape}")


def dense_conv(layer: BcsrLayer, x: np.ndarray) -> np.ndarray:
    _check_channels(x, layer.C, layer.name)
    return _conv2d_forward(x, layer.to_dense().astype(x.dtype), layer.stride, layer.padding)


def sparse_direct_conv(layer: BcsrLayer, x: np.ndarray) -> np.ndarray:
    """Sum of x[col] * block over each filter's stored blocks (BSR times patches)."""
    _check_channels(x, layer.C, layer.name)
    n, c, h, w = x.shape
    s, p, kh, kw = layer.stride, layer.padding, layer.kh, layer.kw
    ho, wo = conv_output_shape(h, w, kh, kw, s, p)
    if layer.nnz_blocks == 0:
        return np.zeros((n, layer.K, ho, wo), x.dtype)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    xp = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    weights = sp.bsr_matrix((layer.blocks.reshape(-1, 1, kh * kw).astype(x.dtype), layer.col_idx,
                             layer.row_ptr), shape=(layer.K, c * kh * kw))
    out = weights @ cols.reshape(c * kh * kw, n * ho * wo)
    return np.ascontiguousarray(np.asarray(out).reshape(layer.K, n, ho, wo).transpose(1, 0, 2, 3))


def winograd_conv(layer: WinogradLayer, x: np.ndarray) -> np.ndarray:
    """F(2x2, 3x3) over 4x4 input tiles taken every 2 pixels; pads bottom/right
    to whole tiles.  A strided layer subsamples the stride-1 result."""
    _check_channels(x, layer.C, layer.name)
    n, c, h, w = x.shape
    p, s = layer.padding, layer.stride
    if layer.nnz_blocks == 0:
        return np.zeros((n, layer.K, *conv_output_shape(h, w, 3, 3, s, p)), x.dtype)
    ho, wo = conv_output_shape(h, w, 3, 3, 1, p)
    th, tw = -(-ho // 2), -(-wo // 2)
    xp = np.zeros((n, c, 2 * th + 2, 2 * tw + 2), x.dtype)
    xp[:, :, p:p + h, p:p + w] = x
    tiles = np.lib.stride_tricks.sliding_window_view(xp, (4, 4), axis=(2, 3))[:, :, ::2, ::2]
    bt = BT.astype(x.dtype)
    V = np.einsum("ij,nctujk,lk->nctuil", bt, tiles, bt, optimize=True)  # (n, c, th, tw, 4, 4)
    V = V.transpose(4, 5, 1, 0, 2, 3).reshape(16, c, n * th * tw)
    U = layer.U.reshape(-1, 16).astype(x.dtype)
    M = np.empty((16, layer.K, n * th * tw), x.dtype)
    for e in range(16):
        We = sp.csr_matrix((U[:, e], layer.col_idx, layer.row_ptr), shape=(layer.K, c))
        M[e] = We @ V[e]
    M = M.reshape(4, 4, layer.K, n, th, tw)
    at = AT.astype(x.dtype)
    Y = np.einsum("ij,jkfnab,lk->nfaibl", at, M, at, optimize=True)  # (n, K, th, 2, tw, 2)
    return np.ascontiguousarray(Y.reshape(n, layer.K, 2 * th, 2 * tw)[:, :, :ho:s, :wo:s])


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class SparseBN:
    name: str
    shift: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float
    gamma: np.ndarray | None = None

    def __call__(self, x):
        inv = (1.0 / np.sqrt(self.var + self.eps)).astype(x.dtype)
        y = (x - self.mean.reshape(1, -1, 1, 1).astype(x.dtype)) * inv.reshape(1, -1, 1, 1)
        if self.gamma is not None:
            y = y * self.gamma.reshape(1, -1, 1, 1)
        return y + self.shift.reshape(1, -1, 1, 1)


@dataclass
class SparseLinear:
    name: str
    weight: np.ndarray
    bias: np.ndarray

    def __call__(self, x):
        return x @ self.weight.T + self.bias


@dataclass
class SparseResidual:
    body: list
    shortcut: BcsrLayer | None = None


Op = Union[BcsrLayer, SparseBN, SparseLinear, SparseResidual, str]


@dataclass
class BcsrModel:
    """Inference-only network whose convolutions are BCSR layers."""

    ops: list = field(default_factory=list)
    _wino: dict = field(default_factory=dict, repr=False)

    def conv_layers(self) -> list[BcsrLayer]:
        out = []

        def walk(ops):
            for op in ops:
                if isinstance(op, BcsrLayer):
                    out.append(op)
                elif isinstance(op, SparseResidual):
                    walk(op.body)
                    if op.shortcut is not None:
                        out.append(op.shortcut)
        walk(self.ops)
        return out

    def winograd(self, layer: BcsrLayer) -> WinogradLayer | None:
        if layer.name not in self._wino:
            try:
                self._wino[layer.name] = winograd_transform(layer)
            except UnsupportedGeometry:
                self._wino[layer.name] = None
        return self._wino[layer.name]

    def conv(self, layer: BcsrLayer, x: np.ndarray, path: str) -> np.ndarray:
        if path == "dense":
            return dense_conv(layer, x)
        if path == "winograd":
            wl = self.winograd(layer)
            if wl is not None:
                return winograd_conv(wl, x)
            return sparse_direct_conv(layer, x)
        if path == "direct":
            return sparse_direct_conv(layer, x)
        raise ValueError(f"unknown path {path!r}; expected one of {PATHS}")

    def forward(self, x: np.ndarray, path: str = "direct", timings: dict | None = None) -> np.ndarray:
        x = np.asarray(x, np.float32)

        def run(ops, x):
            for op in ops:
                if isinstance(op, BcsrLayer):
                    t0 = time.perf_counter_ns()
                    x = self.conv(op, x, path)
                    if timings is not None:
                        timings.setdefault(op.name, []).append(time.perf_counter_ns() - t0)
                elif isinstance(op, SparseResidual):
                    y = run(op.body, x)
                    skip = x if op.shortcut is None else run([op.shortcut], x)
                    x = y + skip
                elif op == "relu":
                    x = np.maximum(x, 0)
                elif op == "gap":
                    x = x.mean(axis=(2, 3))
                else:
                    x = op(x)
            return x
        return run(self.ops, x)

    def predict(self, x: np.ndarray, path: str = "direct", batch_size: int = 500) -> np.ndarray:
        return np.concatenate([self.forward(x[i:i + batch_size], path)
                               for i in range(0, len(x), batch_size)]).argmax(axis=1)


def export_bcsr(net: Network) -> BcsrModel:
    """Fold strengths into kernels and convert every conv to BCSR."""
    def conv_op(layer: ReparamConv2d) -> BcsrLayer:
        kernels = layer.folded_kernels().astype(np.float32)
        return BcsrLayer.from_dense(kernels, layer.mask, layer.stride, layer.padding, layer.name)

    def convert(layers):
        ops = []
        for layer in layers:
            if isinstance(layer, ReparamConv2d):
                ops.append(conv_op(layer))
            elif isinstance(layer, BatchNorm2d):
                gamma = None if layer.scale is None else layer.gamma().astype(np.float32)
                ops.append(SparseBN(layer.name, layer.shift.data.astype(np.float32),
                                    layer.running_mean.astype(np.float32),
                                    layer.running_var.astype(np.float32), layer.eps, gamma))
            elif isinstance(layer, ReLU):
                ops.append("relu")
            elif isinstance(layer, GlobalAvgPool):
                ops.append("gap")
            elif isinstance(layer, Linear):
                ops.append(SparseLinear(layer.name, layer.weight.data.astype(np.float32),
                                        layer.bias.data.astype(np.float32)))
            elif isinstance(layer, Residual):
                ops.append(SparseResidual(convert(layer.body),
                                          None if layer.shortcut is None else conv_op(layer.shortcut)))
            else:
                raise TypeError(f"cannot export {type(layer).__name__}")
        return ops

    return BcsrModel(convert(net.layers))


# ---------------------------------------------------------------------------
# SBCR file format
# ---------------------------------------------------------------------------

def _name(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _section(tag: int, payload: bytes) -> bytes:
    return struct.pack("<IQ", tag, len(payload)) + payload


def _encode(ops) -> list[bytes]:
    out = []
    for op in ops:
        if isinstance(op, BcsrLayer):
            payload = (_name(op.name)
                       + struct.pack("<7I", op.K, op.C, op.kh, op.kw, op.stride, op.padding, op.nnz_blocks)
                       + op.row_ptr.astype("<u4").tobytes() + op.col_idx.astype("<u4").tobytes()
                       + _f32(op.blocks))
            out.append(_section(TAG_CONV, payload))
        elif isinstance(op, SparseBN):
            payload = (_name(op.name) + struct.pack("<IBd", len(op.shift), op.gamma is not None, op.eps)
                       + _f32(op.shift) + _f32(op.mean) + _f32(op.var)
                       + (b"" if op.gamma is None else _f32(op.gamma)))
            out.append(_section(TAG_BN, payload))
        elif isinstance(op, SparseLinear):
            o, i = op.weight.shape
            out.append(_section(TAG_LINEAR, _name(op.name) + struct.pack("<II", o, i)
                                + _f32(op.weight) + _f32(op.bias)))
        elif isinstance(op, SparseResidual):
            inner = _encode(op.body) + ([] if op.shortcut is None else _encode([op.shortcut]))
            payload = struct.pack("<IB", len(op.body), op.shortcut is not None) + b"".join(inner)
            out.append(_section(TAG_RESIDUAL, payload))
        elif op == "relu":
            out.append(_section(TAG_RELU, b""))
        elif op == "gap":
            out.append(_section(TAG_GAP, b""))
        else:
            raise TypeError(f"cannot encode {op!r}")
    return out


def to_bytes(model: BcsrModel) -> bytes:
    sections = _encode(model.ops)
    return MAGIC + struct.pack("<II", VERSION, len(sections)) + b"".join(sections)


def write_sbcr(model: BcsrModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError(f"SBCR data truncated at byte {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def u32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<u4").astype(np.int64)


def _decode(r: _Reader, count: int) -> list:
    ops = []
    while len(ops) < count:
        tag, length = r.unpack("<IQ")
        end = r.pos + length
        if tag == TAG_CONV:
            name = r.name()
            K, C, kh, kw, stride, padding, nb = r.unpack("<7I")
            row_ptr = r.u32(K + 1)
            col_idx = r.u32(nb)
            blocks = r.f32(nb * kh * kw)
            ops.append(BcsrLayer(name, K, C, kh, kw, stride, padding, row_ptr, col_idx, blocks))
        elif tag == TAG_BN:
            name = r.name()
            c, has_gamma, eps = r.unpack("<IBd")
            shift, mean, var = r.f32(c), r.f32(c), r.f32(c)
            ops.append(SparseBN(name, shift, mean, var, eps, r.f32(c) if has_gamma else None))
        elif tag == TAG_LINEAR:
            name = r.name()
            o, i = r.unpack("<II")
            ops.append(SparseLinear(name, r.f32(o * i).reshape(o, i), r.f32(o)))
        elif tag == TAG_RESIDUAL:
            n_body, has_sc = r.unpack("<IB")
            body = _decode(r, n_body)
            shortcut = _decode(r, 1)[0] if has_sc else None
            ops.append(SparseResidual(body, shortcut))
        elif tag == TAG_RELU:
            ops.append("relu")
        elif tag == TAG_GAP:
            ops.append("gap")
        else:
            # unknown section: skip its payload, it does not count toward ``count``
            r.take(length)
            count -= 1
            continue
        if r.pos != end:
            raise ValueError(f"SBCR section tag {tag} length mismatch")
    return ops


def from_bytes(buf: bytes) -> BcsrModel:
    if buf[:4] != MAGIC:
        raise ValueError(f"not an SBCR file (magic {buf[:4]!r})")
    r = _Reader(buf, 4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise ValueError(f"unsupported SBCR version {version}")
    return BcsrModel(_decode(r, count))


def read_sbcr(path) -> BcsrModel:
    return from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["path", "layer", "density", "median_ns"])
        for r in self.rows:
            w.writerow([r["path"], r["layer"], f"{100 * r['density']:.1f}%", r["median_ns"]])
        return buf.getvalue()

    def density(self, layer: str = "total") -> float:
        return next(r["density"] for r in self.rows if r["layer"] == layer)


def bench(model: BcsrModel | str | Path, input_shape: tuple[int, ...], repetitions: int = 5,
          seed: int = 0, paths=PATHS) -> BenchReport:
    """Median wall time per conv layer and per full forward, for each path."""
    if not isinstance(model, BcsrModel):
        model = read_sbcr(model)
    x = np.random.default_rng(seed).standard_normal(input_shape).astype(np.float32)
    layers = model.conv_layers()
    total_blocks = sum(l.nnz_blocks for l in layers)
    total_kernels = sum(l.K * l.C for l in layers)
    report = BenchReport()
    for path in paths:
        timings: dict[str, list[int]] = {}
        totals = []
        for _ in range(max(1, repetitions)):
            t0 = time.perf_counter_ns()
            model.forward(x, path, timings)
            totals.append(time.perf_counter_ns() - t0)
        for l in layers:
            report.rows.append({"path": path, "layer": l.name, "density": l.density,
                                "median_ns": int(np.median(timings[l.name]))})
        report.rows.append({"path": path, "layer": "total", "density": total_blocks / total_kernels,
                            "median_ns": int(np.median(totals))})
    return report
