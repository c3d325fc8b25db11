"""Dense tensors, CNN primitives and a tape-based reverse-mode autodiff.

Every primitive runs eagerly on numpy arrays.  When a :class:`Graph` is
active and an input requires a gradient, the primitive appends a node to the
graph holding its inputs, output, a forward closure (for replay) and a
backward closure.  ``Graph.backward`` walks the tape in reverse.

Activations use the NCHW layout.  Float32 is the default precision; cast the
model to float64 for gradient checking.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_ACTIVE: list["Graph"] = []


class Tensor:
    """An ndarray plus the bookkeeping needed by the tape.

    ``kind`` tags trainable parameters (``"strength"``, ``"direction"``, ...)
    so the optimizer can treat each class differently.
    """

    __slots__ = ("data", "requires_grad", "name", "kind")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 kind: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.kind = kind

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Ordered record of primitive applications.

    Use as a context manager; operations executed inside are recorded::

        with Graph() as g:
            loss = model.loss(x, y)
        grads = g.backward(loss, model.parameters())
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def leaves(self) -> list[Tensor]:
        produced = {id(n.output) for n in self.nodes}
        seen: dict[int, Tensor] = {}
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of the scalar ``loss`` for ``params`` (default: all graph leaves).

        Parameters that ``loss`` does not depend on get an all-zero gradient.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        params = self.leaves() if params is None else list(params)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gout = grads.pop(id(node.output), None)
            if gout is None:
                continue
            for t, g in zip(node.inputs, node.backward(gout)):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        out = {}
        for p in params:
            g = grads.get(id(p))
            out[p] = np.zeros_like(p.data) if g is None else g.reshape(p.shape).astype(p.dtype, copy=False)
        return out

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded node from its saved inputs."""
        return [n.forward(*(t.data for t in n.inputs)) for n in self.nodes]


def backward(graph: Graph, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    return graph.backward(loss, params)


def _apply(op: str, inputs: Sequence[Tensor], forward: Callable[..., np.ndarray],
           make_backward: Callable[..., Callable]) -> Tensor:
    """Evaluate ``forward`` and record it when a graph is active.

    ``make_backward(out_data)`` returns the backward closure; it is only built
    when recording, so inference pays nothing for saved state.
    """
    out_data = forward(*(t.data for t in inputs))
    needs = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _ACTIVE[-1].record(Node(op, tuple(inputs), out, forward, make_backward(out_data)))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _apply("add", (a, b), np.add,
                  lambda out: lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _apply("mul", (a, b), np.multiply,
                  lambda out: lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def tsum(a: Tensor) -> Tensor:
    return _apply("sum", (a,), lambda x: np.asarray(x.sum(), dtype=x.dtype),
                  lambda out: lambda g: (np.broadcast_to(g, a.shape).copy(),))


def exp(a: Tensor) -> Tensor:
    return _apply("exp", (a,), np.exp, lambda out: lambda g: (g * out,))


def abs_(a: Tensor) -> Tensor:
    """|a| with the subgradient fixed to 0 at a == 0."""
    return _apply("abs", (a,), np.abs, lambda out: lambda g: (g * np.sign(a.data),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _apply("reshape", (a,), lambda x: x.reshape(shape),
                  lambda out: lambda g: (g.reshape(a.shape),))


def relu(x: Tensor) -> Tensor:
    return _apply("relu", (x,), lambda v: np.maximum(v, 0),
                  lambda out: lambda g: (g * (x.data > 0),))


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC by averaging the spatial positions."""
    def backward(out):
        n, c, h, w = x.shape
        return lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)
    return _apply("global_avg_pool", (x,), lambda v: v.mean(axis=(2, 3)), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias, weight shaped (out, in)."""
    if bias is None:
        return _apply("linear", (x, weight), lambda v, w: v @ w.T,
                      lambda out: lambda g: (g @ weight.data, g.T @ x.data))
    return _apply("linear", (x, weight, bias), lambda v, w, b: v @ w.T + b,
                  lambda out: lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_shape(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"non-positive output extent {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}, "
                         f"stride {stride}, padding {padding}")
    return ho, wo


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (N, kh*kw*C, Ho*Wo) patches, tap-major then channel."""
    n, c, h, w = x.shape
    ho, wo = conv_output_shape(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, kh, kw, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, kh * kw * c, ho * wo)


def col2im(dcols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int, stride: int,
           padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back onto the input grid."""
    n, c, h, w = shape
    ho, wo = conv_output_shape(h, w, kh, kw, stride, padding)
    dcols = dcols.reshape(n, kh, kw, c, ho, wo)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    k, c, kh, kw = w.shape
    return w.transpose(0, 2, 3, 1).reshape(k, kh * kw * c)


def _conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int,
                    cache: dict | None = None) -> np.ndarray:
    n, c, h, wd = x.shape
    k, ck, kh, kw = w.shape
    if c != ck:
        raise ValueError(f"input has {c} channels but kernels expect {ck}")
    ho, wo = conv_output_shape(h, wd, kh, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    if cache is not None:
        cache["cols"] = cols
    return np.matmul(_kernel_matrix(w), cols).reshape(n, k, ho, wo)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free cross-correlation with zero padding.

    ``kernels`` is (K, C, kh, kw); output is (N, K, Ho, Wo).
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    cache: dict = {}

    def make_backward(out):
        cols = cache.pop("cols")
        wd = kernels.data
        k, c, kh, kw = wd.shape

        def back(g):
            gm = g.reshape(g.shape[0], k, -1)
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(k, kh, kw, c).transpose(0, 3, 1, 2)
            if not x.requires_grad:
                return None, gw
            dcols = np.matmul(_kernel_matrix(wd).T, gm)
            return col2im(dcols, x.shape, kh, kw, stride, padding), gw
        return back

    out = _apply("conv2d", (x, kernels),
                 lambda a, b: _conv2d_forward(a, b, stride, padding, cache), make_backward)
    cache.clear()
    return out


def conv2d_reference(x: np.ndarray, kernels: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Naive loop convolution; the oracle for :func:`conv2d`."""
    n, c, h, w = x.shape
    k, _, kh, kw = kernels.shape
    ho, wo = conv_output_shape(h, w, kh, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, k, ho, wo), dtype=np.float64)
    for b in range(n):
        for f in range(k):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, f, i, j] = np.sum(patch * kernels[f])
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, shift: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5,
               scale: Tensor | None = None) -> Tensor:
    """Per-channel normalization followed by ``scale * xhat + shift``.

    With ``scale=None`` the channel scale is absent.  Training mode normalizes
    with biased batch statistics over (N, H, W) and updates the running
    buffers in place: ``running = momentum * running + (1 - momentum) * batch``.
    """
    c = shift.shape[0]
    if x.shape[1] != c:
        raise ValueError(f"batch norm over {c} channels got input with {x.shape[1]}")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    mean = mean.astype(x.dtype)

    def fwd(xd, beta, gamma=None):
        xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
        if gamma is not None:
            xhat = xhat * gamma.reshape(bshape)
        return xhat + beta.reshape(bshape)

    inputs = (x, shift) if scale is None else (x, shift, scale)

    def make_backward(out):
        xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)

        def back(g):
            gshift = g.sum(axis=axes)
            gscale = None
            gx_hat = g
            if scale is not None:
                gscale = (g * xhat).sum(axis=axes)
                gx_hat = g * scale.data.reshape(bshape)
            if training:
                m = g.shape[0] * g.shape[2] * g.shape[3]
                gx = (inv.reshape(bshape) / m) * (
                    m * gx_hat
                    - gx_hat.sum(axis=axes, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=axes, keepdims=True))
            else:
                gx = gx_hat * inv.reshape(bshape)
            return (gx, gshift) if scale is None else (gx, gshift, gscale)
        return back

    return _apply("batch_norm", inputs, fwd, make_backward)


# ---------------------------------------------------------------------------
# kernel reparameterization helpers
# ---------------------------------------------------------------------------

def kernel_norms(w: Tensor) -> Tensor:
    """Frobenius norm of each (kh, kw) slice: (K, C, kh, kw) -> (K, C)."""
    def make_backward(out):
        safe = np.where(out > 0, out, 1)
        return lambda g: ((g / safe)[:, :, None, None] * w.data,)
    return _apply("kernel_norms", (w,), lambda v: np.sqrt((v * v).sum(axis=(2, 3))), make_backward)


def unit_kernels(v: Tensor) -> Tensor:
    """Divide each (kh, kw) slice by its Frobenius norm; zero slices stay zero."""
    def norms(d):
        n = np.sqrt((d * d).sum(axis=(2, 3), keepdims=True))
        return np.where(n > 0, n, 1)

    def make_backward(out):
        nrm = norms(v.data)
        # d(v/|v|) = (g - u <u, g>) / |v|
        return lambda g: ((g - out * (g * out).sum(axis=(2, 3), keepdims=True)) / nrm,)
    return _apply("unit_kernels", (v,), lambda d: d / norms(d), make_backward)


def scale_kernels(strength: Tensor, unit: Tensor) -> Tensor:
    """strength[k, c] * unit[k, c] for every (kh, kw) slice."""
    return _apply("scale_kernels", (strength, unit), lambda s, u: s[:, :, None, None] * u,
                  lambda out: lambda g: ((g * unit.data).sum(axis=(2, 3)), g * strength.data[:, :, None, None]))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    rows = np.arange(n)

    def fwd(z):
        shifted = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        return np.asarray((lse - shifted[rows, labels]).mean(), dtype=z.dtype)

    def make_backward(out):
        def back(g):
            z = logits.data
            p = np.exp(z - z.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            p[rows, labels] -= 1
            return (p * (g / n),)
        return back

    return _apply("softmax_cross_entropy", (logits,), fwd, make_backward)


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
