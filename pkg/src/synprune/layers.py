"""Layers with explicit per-kernel strengths, and the network container.

A kernel-normalized convolution stores each (filter, channel) kernel as a
strength scalar ``s`` times a unit-Frobenius direction.  Batch norm drops its
channel scale, so ``|s|`` is the whole importance of a connection.

Four layer variants are supported through two flags:

===============  ===========  ============  ===================================
variant          fix_gamma    kernel_norm   indicator
===============  ===========  ============  ===================================
synaptic         True         True          |s|
non_fix_gamma    False        True          |gamma_c * s|   (gamma = exp(log))
non_kernel_norm  True         False         ||k||_F
standard         False        False         |gamma_c * ||k||_F|
===============  ===========  ============  ===================================

``standard`` is an ordinary conv + BN(gamma, beta) network.  It is the source
of :func:`equivalence_transform` and the group-lasso baseline.
"""
from __future__ import annotations

import copy
import json
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = {
    (True, True): "synaptic",
    (False, True): "non_fix_gamma",
    (True, False): "non_kernel_norm",
    (False, False): "standard",
}


def variant_name(fix_gamma: bool, kernel_norm: bool) -> str:
    return VARIANTS[(bool(fix_gamma), bool(kernel_norm))]


def variant_flags(variant: str) -> tuple[bool, bool]:
    for flags, name in VARIANTS.items():
        if name == variant:
            return flags
    raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS.values())}")


def normalize_kernel(k: np.ndarray) -> tuple[float, np.ndarray, bool]:
    """Split ``k`` into its Frobenius norm and unit direction.

    Returns ``(r, unit, was_zero)``.  An all-zero kernel gives ``r = 0`` and a
    centered delta as the direction.
    """
    k = np.asarray(k)
    r = float(np.sqrt(np.sum(k.astype(np.float64) ** 2)))
    if r == 0.0:
        unit = np.zeros_like(k)
        unit[tuple(d // 2 for d in k.shape)] = 1
        return 0.0, unit, True
    return r, k / np.asarray(r, dtype=k.dtype), False


class Layer:
    name: str = ""

    def parameters(self) -> list[Tensor]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError


class ReparamConv2d(Layer):
    """Bias-free convolution with kernels ``strength[k, c] * unit(direction[k, c])``.

    The direction is normalized inside the forward pass, so gradients see the
    projection; :meth:`renormalize` snaps stored directions back to the unit
    sphere after each optimizer step.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 1, rng: np.random.Generator | None = None,
                 name: str = "conv", dtype=T.DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       (out_channels, in_channels, kernel_size, kernel_size))
        norms = np.sqrt((w ** 2).sum(axis=(2, 3)))
        self.strength = Tensor(norms.astype(dtype), True, f"{name}.strength", "strength")
        self.direction = Tensor((w / norms[:, :, None, None]).astype(dtype), True,
                                f"{name}.direction", "direction")
        self.mask = np.ones((out_channels, in_channels), dtype=bool)

    kernel_norm = True

    def parameters(self):
        return [self.strength, self.direction]

    def effective_kernels(self) -> Tensor:
        w = T.scale_kernels(self.strength, T.unit_kernels(self.direction))
        if not self.mask.all():
            w = T.mul(w, Tensor(self.mask[:, :, None, None].astype(w.dtype)))
        return w

    def folded_kernels(self) -> np.ndarray:
        """Inference kernels ``s * k'`` with pruned kernels zeroed."""
        return self.effective_kernels().data

    def forward(self, x, training):
        return T.conv2d(x, self.effective_kernels(), self.stride, self.padding)

    def strength_values(self) -> np.ndarray:
        """Signed explicit norm parameter ``s`` per kernel."""
        return self.strength.data

    def signed_strength(self) -> Tensor:
        return self.strength

    def renormalize(self) -> None:
        d = self.direction.data
        n = np.sqrt((d * d).sum(axis=(2, 3), keepdims=True))
        self.direction.data = np.where(n > 0, d / np.where(n > 0, n, 1), d)

    def zero_masked(self) -> None:
        dead = ~self.mask
        self.strength.data[dead] = 0
        self.direction.data[dead] = 0

    def describe(self) -> dict:
        return {"op": "conv", "name": self.name, "in": self.in_channels, "out": self.out_channels,
                "kernel": self.kernel_size, "stride": self.stride, "padding": self.padding}


class Conv2d(ReparamConv2d):
    """Plain bias-free convolution with raw kernels (``kernel_norm=False``)."""

    kernel_norm = False

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1,
                 rng=None, name="conv", dtype=T.DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       (out_channels, in_channels, kernel_size, kernel_size))
        self.weight = Tensor(w.astype(dtype), True, f"{name}.weight", "weight")
        self.mask = np.ones((out_channels, in_channels), dtype=bool)

    def parameters(self):
        return [self.weight]

    def effective_kernels(self):
        if self.mask.all():
            return self.weight
        return T.mul(self.weight, Tensor(self.mask[:, :, None, None].astype(self.weight.dtype)))

    def strength_values(self):
        return np.sqrt((self.weight.data.astype(np.float64) ** 2).sum(axis=(2, 3))).astype(self.weight.dtype)

    def signed_strength(self):
        return T.kernel_norms(self.weight)

    def renormalize(self):
        pass

    def zero_masked(self):
        self.weight.data[~self.mask] = 0


class BatchNorm2d(Layer):
    """Batch norm whose channel scale is absent, log-parameterized or plain.

    ``scale_mode``: ``None`` (no scale), ``"log"`` (gamma = exp(log_scale),
    always positive) or ``"linear"`` (ordinary gamma).
    """

    def __init__(self, channels: int, scale_mode: str | None = None, momentum: float = 0.9,
                 eps: float = 1e-5, name: str = "bn", dtype=T.DEFAULT_DTYPE):
        if scale_mode not in (None, "log", "linear"):
            raise ValueError(f"bad scale_mode {scale_mode!r}")
        self.name = name
        self.channels = channels
        self.scale_mode = scale_mode
        self.momentum, self.eps = momentum, eps
        self.shift = Tensor(np.zeros(channels, dtype), True, f"{name}.shift", "bn_shift")
        self.scale: Tensor | None = None
        if scale_mode == "log":
            self.scale = Tensor(np.zeros(channels, dtype), True, f"{name}.log_scale", "bn_log_gamma")
        elif scale_mode == "linear":
            self.scale = Tensor(np.ones(channels, dtype), True, f"{name}.scale", "bn_gamma")
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)

    def parameters(self):
        return [self.shift] if self.scale is None else [self.shift, self.scale]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def gamma_tensor(self) -> Tensor | None:
        if self.scale is None:
            return None
        return T.exp(self.scale) if self.scale_mode == "log" else self.scale

    def gamma(self) -> np.ndarray:
        """Effective per-channel scale (ones when absent)."""
        if self.scale is None:
            return np.ones(self.channels, self.shift.dtype)
        return np.exp(self.scale.data) if self.scale_mode == "log" else self.scale.data

    def forward(self, x, training):
        return T.batch_norm(x, self.shift, self.running_mean, self.running_var, training,
                            self.momentum, self.eps, self.gamma_tensor())

    def describe(self):
        return {"op": "bn", "name": self.name, "channels": self.channels}


class ReLU(Layer):
    def forward(self, x, training):
        return T.relu(x)

    def describe(self):
        return {"op": "relu"}


class GlobalAvgPool(Layer):
    def forward(self, x, training):
        return T.global_avg_pool(x)

    def describe(self):
        return {"op": "gap"}


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng=None, name: str = "fc",
                 dtype=T.DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype),
                             True, f"{name}.weight", "linear_weight")
        self.bias = Tensor(np.zeros(out_features, dtype), True, f"{name}.bias", "linear_bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training):
        return T.linear(x, self.weight, self.bias)

    def describe(self):
        return {"op": "linear", "name": self.name, "in": self.in_features, "out": self.out_features}


class Residual(Layer):
    """``body(x) + shortcut(x)``; identity shortcut when ``shortcut`` is None."""

    def __init__(self, body: list[Layer], shortcut: ReparamConv2d | None = None, name: str = "res"):
        self.name = name
        self.body = body
        self.shortcut = shortcut

    def forward(self, x, training):
        y = x
        for layer in self.body:
            y = layer.forward(y, training)
        skip = x if self.shortcut is None else self.shortcut.forward(x, training)
        return T.add(y, skip)

    def describe(self):
        return {"op": "residual", "name": self.name, "body": [l.describe() for l in self.body],
                "shortcut": None if self.shortcut is None else self.shortcut.describe()}


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

def desknet_spec(in_channels: int = 1, num_classes: int = 10, width: int = 32,
                 first_stride: int = 1) -> list[dict]:
    """Stem conv, five BN-ReLU-Conv units (one residual pair, one stride-2
    unit), then BN-ReLU, global average pooling and a linear classifier."""
    w, w2 = width, 2 * width

    def conv(name, cin, cout, stride=1):
        return {"op": "conv", "name": name, "in": cin, "out": cout, "kernel": 3,
                "stride": stride, "padding": 1}

    def unit(name, cin, cout, stride=1):
        return [{"op": "bn", "name": f"{name}.bn", "channels": cin}, {"op": "relu"},
                conv(f"{name}.conv", cin, cout, stride)]

    return [
        conv("stem", in_channels, w, first_stride),
        *unit("unit1", w, w),
        {"op": "residual", "name": "pair", "body": unit("pair.a", w, w) + unit("pair.b", w, w),
         "shortcut": None},
        *unit("down", w, w2, stride=2),
        *unit("unit5", w2, w2),
        {"op": "bn", "name": "head.bn", "channels": w2}, {"op": "relu"},
        {"op": "gap"},
        {"op": "linear", "name": "fc", "in": w2, "out": num_classes},
    ]


def validate_spec(spec: list[dict]) -> None:
    """Check channel chaining and the BN-f-Conv ordering of every non-stem conv."""
    def walk(descs, channels, first):
        prev_bn = False
        for d in descs:
            op = d["op"]
            if op == "conv":
                if channels is not None and d["in"] != channels:
                    raise ValueError(f"{d['name']}: expects {d['in']} channels, receives {channels}")
                if not first and not prev_bn:
                    raise ValueError(f"{d['name']}: convolution must follow BN-ReLU")
                channels, first, prev_bn = d["out"], False, False
            elif op == "bn":
                if channels is not None and d["channels"] != channels:
                    raise ValueError(f"{d['name']}: expects {d['channels']} channels, receives {channels}")
                prev_bn = True
            elif op == "relu":
                pass
            elif op == "residual":
                out = walk(d["body"], channels, False)
                if d["shortcut"] is not None:
                    sc = d["shortcut"]
                    if sc["in"] != channels or sc["out"] != out:
                        raise ValueError(f"{d['name']}: shortcut shape mismatch")
                elif out != channels:
                    raise ValueError(f"{d['name']}: identity shortcut needs equal channels")
                channels, prev_bn = out, False
            elif op == "gap":
                prev_bn = False
            elif op == "linear":
                if channels is not None and d["in"] != channels:
                    raise ValueError(f"{d['name']}: expects {d['in']} features, receives {channels}")
                channels = d["out"]
            else:
                raise ValueError(f"unknown op {op!r}")
        return channels

    walk(spec, None, True)


class Network:
    """Sequential container built from a list of layer descriptors."""

    def __init__(self, spec: list[dict], variant: str = "synaptic", seed: int = 0,
                 bn_momentum: float = 0.9, bn_eps: float = 1e-5, dtype=T.DEFAULT_DTYPE):
        validate_spec(spec)
        self.spec = copy.deepcopy(spec)
        self.variant = variant
        fix_gamma, kernel_norm = variant_flags(variant)
        self.fix_gamma, self.kernel_norm = fix_gamma, kernel_norm
        scale_mode = None if fix_gamma else ("log" if kernel_norm else "linear")
        conv_cls = ReparamConv2d if kernel_norm else Conv2d
        rng = np.random.default_rng(seed)

        def build(d):
            op = d["op"]
            if op == "conv":
                return conv_cls(d["in"], d["out"], d["kernel"], d["stride"], d["padding"],
                                rng=rng, name=d["name"], dtype=dtype)
            if op == "bn":
                return BatchNorm2d(d["channels"], scale_mode, bn_momentum, bn_eps, d["name"], dtype)
            if op == "relu":
                return ReLU()
            if op == "gap":
                return GlobalAvgPool()
            if op == "linear":
                return Linear(d["in"], d["out"], rng=rng, name=d["name"], dtype=dtype)
            if op == "residual":
                return Residual([build(b) for b in d["body"]],
                                None if d["shortcut"] is None else build(d["shortcut"]), d["name"])
            raise ValueError(op)

        self.layers = [build(d) for d in spec]

    # -- traversal --------------------------------------------------------

    def _flat(self, layers=None) -> Iterator[Layer]:
        for layer in self.layers if layers is None else layers:
            if isinstance(layer, Residual):
                yield from self._flat(layer.body)
                if layer.shortcut is not None:
                    yield layer.shortcut
            else:
                yield layer

    def modules(self) -> list[Layer]:
        return list(self._flat())

    def conv_layers(self) -> list[tuple[ReparamConv2d, BatchNorm2d | None]]:
        """Every prunable conv with the BN that precedes it (None for the stem
        and shortcuts), in network order."""
        out = []

        def walk(layers, entry_bn):
            last_bn = None
            for layer in layers:
                if isinstance(layer, BatchNorm2d):
                    last_bn = layer
                elif isinstance(layer, ReparamConv2d):
                    out.append((layer, last_bn))
                    last_bn = None
                elif isinstance(layer, Residual):
                    walk(layer.body, None)
                    if layer.shortcut is not None:
                        out.append((layer.shortcut, None))
                    last_bn = None
        walk(self.layers, None)
        return out

    def bn_consumers(self) -> list[tuple[BatchNorm2d, Layer]]:
        """Pair every BN with the conv or linear layer that consumes it."""
        pairs = []

        def walk(layers):
            pending = None
            for layer in layers:
                if isinstance(layer, BatchNorm2d):
                    pending = layer
                elif isinstance(layer, (ReparamConv2d, Linear)):
                    if pending is not None:
                        pairs.append((pending, layer))
                    pending = None
                elif isinstance(layer, Residual):
                    walk(layer.body)
                    pending = None
            if pending is not None:
                raise ValueError(f"{pending.name} has no consuming conv or linear layer")
        walk(self.layers)
        return pairs

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.modules() for p in layer.parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.modules():
            out.update(layer.buffers())
        return out

    def masks(self) -> dict[str, np.ndarray]:
        return {conv.name: conv.mask for conv, _ in self.conv_layers()}

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    # -- compute ----------------------------------------------------------

    def forward(self, x, training: bool = False) -> Tensor:
        x = T.as_tensor(x)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def predict_logits(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Eval-mode logits, evaluated in batches with no recording."""
        outs = [self.forward(x[i:i + batch_size], training=False).data
                for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.spec[-1]["out"]), self.dtype)

    def accuracy(self, x: np.ndarray, y: np.ndarray, batch_size: int = 500) -> float:
        if len(y) == 0:
            return 0.0
        return float(np.mean(self.predict_logits(x, batch_size).argmax(axis=1) == y))

    def strength_terms(self) -> list[tuple[ReparamConv2d, Tensor]]:
        """Signed differentiable strengths per conv (gamma * s, or gamma * ||k||)."""
        terms = []
        for conv, bn in self.conv_layers():
            s = conv.signed_strength()
            gamma = None if bn is None else bn.gamma_tensor()
            if gamma is not None:
                s = T.mul(s, T.reshape(gamma, (1, -1)))
            terms.append((conv, s))
        return terms

    # -- state ------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        state.update({name: b.copy() for name, b in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        bufs = self.buffers()
        for name, value in state.items():
            if name in params:
                if params[name].shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {params[name].shape}")
                params[name].data = value.astype(params[name].dtype).copy()
            elif name in bufs:
                bufs[name][...] = value
            else:
                raise KeyError(f"unexpected state entry {name!r}")
        missing = set(params) | set(bufs)
        missing -= set(state)
        if missing:
            raise KeyError(f"missing state entries {sorted(missing)}")

    def set_masks(self, masks: dict[str, np.ndarray]) -> None:
        convs = {c.name: c for c, _ in self.conv_layers()}
        for name, m in masks.items():
            if convs[name].mask.shape != m.shape:
                raise ValueError(f"mask shape mismatch for {name}")
            convs[name].mask = np.asarray(m, dtype=bool).copy()
            convs[name].zero_masked()

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        """Copy with every parameter and buffer cast to ``dtype``."""
        net = self.copy()
        for p in net.parameters():
            p.data = p.data.astype(dtype)
        for layer in net.modules():
            if isinstance(layer, BatchNorm2d):
                layer.running_mean = layer.running_mean.astype(dtype)
                layer.running_var = layer.running_var.astype(dtype)
        return net

    def spec_json(self) -> str:
        return json.dumps({"spec": self.spec, "variant": self.variant}, sort_keys=True)


def synaptic_strength(conv: ReparamConv2d, preceding_bn: BatchNorm2d | None) -> np.ndarray:
    """Per-kernel importance ``|gamma_c * r_{k,c}|`` as a (K, C) array.

    ``r`` is the explicit strength for kernel-normalized convs and the raw
    kernel norm otherwise; gamma is 1 where there is no BN scale.
    """
    r = conv.strength_values()
    gamma = np.ones(r.shape[1], r.dtype) if preceding_bn is None else preceding_bn.gamma()
    return np.abs(gamma[None, :] * r)


def equivalence_transform(source: Network) -> Network:
    """Rewrite a standard conv + gamma-BN network as a synaptic network.

    Each BN scale is pulled through the ReLU into the strengths of the
    kernels that consume that channel: ``s = gamma_c * ||k||``,
    ``direction = k / ||k||``, ``shift = beta / gamma``.  A BN feeding the
    linear head is folded into the classifier columns instead.
    """
    if source.variant != "standard":
        raise ValueError(f"expected a standard network, got variant {source.variant!r}")
    for bn, _ in source.bn_consumers():
        g = bn.gamma()
        if np.any(g <= 0):
            bad = np.flatnonzero(g <= 0).tolist()
            raise ValueError(f"{bn.name}: channel scale must be positive to pass through ReLU "
                             f"(channels {bad})")

    dtype = source.dtype
    target = Network(source.spec, "synaptic", dtype=dtype)
    src_bn_of = {id(c): bn for c, bn in source.conv_layers()}
    for (sc, _), (tc, _) in zip(source.conv_layers(), target.conv_layers()):
        bn = src_bn_of[id(sc)]
        gamma = np.ones(sc.in_channels) if bn is None else bn.gamma().astype(np.float64)
        w = sc.weight.data.astype(np.float64)
        norms = np.sqrt((w ** 2).sum(axis=(2, 3)))
        unit = np.empty_like(w)
        for k in range(w.shape[0]):
            for c in range(w.shape[1]):
                _, unit[k, c], _ = normalize_kernel(w[k, c])
        tc.strength.data = (gamma[None, :] * norms).astype(dtype)
        tc.direction.data = unit.astype(dtype)
        tc.mask = sc.mask.copy()

    tgt_mods = {m.name: m for m in target.modules() if m.name}
    for bn, consumer in source.bn_consumers():
        tbn = tgt_mods[bn.name]
        g = bn.gamma().astype(np.float64)
        tbn.shift.data = (bn.shift.data / g).astype(dtype)
        tbn.running_mean[...] = bn.running_mean
        tbn.running_var[...] = bn.running_var
        if isinstance(consumer, Linear):
            tfc = tgt_mods[consumer.name]
            tfc.weight.data = (consumer.weight.data * g[None, :]).astype(dtype)
    for m in source.modules():
        if isinstance(m, Linear):
            tfc = tgt_mods[m.name]
            if not any(c is m for _, c in source.bn_consumers()):
                tfc.weight.data = m.weight.data.copy()
            tfc.bias.data = m.bias.data.copy()
    return target
