"""Central finite-difference check of the analytic gradients."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Network, ReLU
from .training import objective


@dataclass
class GradCheckReport:
    """Per-parameter relative errors ``|a - fd| / max(|a|, |fd|)`` over the
    sampled entries (vector norms), grouped by parameter kind.

    ``skipped`` counts entries whose perturbation flipped a ReLU, where
    central differences straddle a kink and say nothing about the gradient.
    """

    entries: list[dict] = field(default_factory=list)

    def by_kind(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e["kind"]] = max(out.get(e["kind"], 0.0), e["rel_error"])
        return out

    @property
    def max_error(self) -> float:
        return max((e["rel_error"] for e in self.entries), default=0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["parameter", "kind", "n", "skipped", "grad_norm", "rel_error"])
        for e in self.entries:
            w.writerow([e["name"], e["kind"], e["n"], e["skipped"], f"{e['grad_norm']:.3e}",
                        f"{e['rel_error']:.3e}"])
        return buf.getvalue()


def _free_mask(net: Network) -> dict[int, np.ndarray]:
    """Boolean arrays of perturbable entries; pruned kernels are excluded."""
    free = {}
    for conv, _ in net.conv_layers():
        for p in conv.parameters():
            m = conv.mask if p.data.ndim == 2 else conv.mask[:, :, None, None]
            free[id(p)] = np.broadcast_to(m, p.data.shape)
    return free


def finite_difference_check(net: Network, x: np.ndarray, y: np.ndarray, lam: float = 0.0,
                            eps: float = 1e-4, n_samples: int = 8, seed: int = 0,
                            regularizer: str = "strength") -> GradCheckReport:
    """Compare autodiff gradients of the training objective against central
    differences in 64-bit precision on ``n_samples`` random entries per tensor.

    The network is converted to float64 (a copy); BN runs in train mode and
    running statistics are restored after every evaluation.  Entries whose
    +-eps perturbation changes any ReLU activation pattern are replaced by
    other entries of the same tensor.
    """
    net = net.astype(np.float64)
    x = np.asarray(x, np.float64)
    rng = np.random.default_rng(seed)
    buffers = {k: v.copy() for k, v in net.buffers().items()}

    def restore():
        for k, v in net.buffers().items():
            v[...] = buffers[k]

    patterns: list[np.ndarray] = []
    for m in net.modules():
        if isinstance(m, ReLU):
            m.forward = _recording(m.forward, patterns)

    def loss_value() -> tuple[float, list[np.ndarray]]:
        patterns.clear()
        val = float(objective(net, x, y, lam, True, regularizer)[0].data)
        restore()
        return val, list(patterns)

    params = net.parameters()
    with T.Graph() as g:
        loss, _ = objective(net, x, y, lam, True, regularizer)
    grads = g.backward(loss, params)
    restore()

    free = _free_mask(net)
    report = GradCheckReport()
    for p in params:
        allowed = np.flatnonzero(free.get(id(p), np.ones(p.data.shape, bool)))
        if allowed.size == 0:
            continue
        flat = p.data.reshape(-1)
        idx, numeric, skipped = [], [], 0
        for i in rng.permutation(allowed):
            if len(idx) == n_samples:
                break
            orig = flat[i]
            flat[i] = orig + eps
            up, pat_up = loss_value()
            flat[i] = orig - eps
            down, pat_down = loss_value()
            flat[i] = orig
            if not all(np.array_equal(a, b) for a, b in zip(pat_up, pat_down)):
                skipped += 1
                continue
            idx.append(i)
            numeric.append((up - down) / (2 * eps))
        if not idx:
            continue
        analytic = grads[p].ravel()[np.array(idx)]
        numeric = np.array(numeric)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        report.entries.append({"name": p.name, "kind": p.kind, "n": len(idx), "skipped": skipped,
                               "grad_norm": float(np.linalg.norm(analytic)),
                               "rel_error": float(np.linalg.norm(analytic - numeric) / scale)})
    return report


def _recording(forward, patterns: list):
    def wrapped(x, training):
        patterns.append(x.data > 0)
        return forward(x, training)
    return wrapped
