"""Global kernel pruning, kernel/FLOP accounting and sensitivity sweeps."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .layers import Network, ReparamConv2d, synaptic_strength
from .tensor import conv_output_shape

logger = logging.getLogger(__name__)

INDICATORS = ("synaptic", "ssl_mean_abs")


class StrengthRecord(NamedTuple):
    layer: int
    filter: int
    channel: int
    value: float
    name: str = ""


def kernel_indicator(conv: ReparamConv2d, bn, kind: str) -> np.ndarray:
    """(K, C) importance of every kernel of one layer."""
    if kind == "synaptic":
        return synaptic_strength(conv, bn)
    if kind == "ssl_mean_abs":
        return np.abs(conv.folded_kernels()).mean(axis=(2, 3))
    raise ValueError(f"unknown indicator {kind!r}; expected one of {INDICATORS}")


def collect_indicators(net: Network, kind: str = "synaptic") -> list[StrengthRecord]:
    """One record per unmasked kernel, ordered by (layer, filter, channel)."""
    records = []
    for li, (conv, bn) in enumerate(net.conv_layers()):
        vals = kernel_indicator(conv, bn, kind)
        for k, c in zip(*np.nonzero(conv.mask)):
            records.append(StrengthRecord(li, int(k), int(c), float(vals[k, c]), conv.name))
    return records


def prune_count(sparsity: float, total: int) -> int:
    """floor(sparsity * total), robust to binary rounding of the fraction."""
    if not 0 <= sparsity < 1:
        raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
    return int(math.floor(round(sparsity * total, 9)))


@dataclass
class PrunePlan:
    kind: str
    target_sparsity: float
    threshold: float
    pruned: list[StrengthRecord]
    total: int

    @property
    def pruned_count(self) -> int:
        return len(self.pruned)

    def masks_for(self, net: Network) -> dict[str, np.ndarray]:
        convs = net.conv_layers()
        masks = {conv.name: conv.mask.copy() for conv, _ in convs}
        for r in self.pruned:
            if r.layer >= len(convs):
                raise ValueError(f"plan references layer {r.layer}; network has {len(convs)}")
            conv = convs[r.layer][0]
            if r.name and r.name != conv.name:
                raise ValueError(f"plan layer {r.layer} is {r.name!r}, network has {conv.name!r}")
            if r.filter >= conv.out_channels or r.channel >= conv.in_channels:
                raise ValueError(f"plan kernel ({r.filter}, {r.channel}) outside {conv.name}")
            masks[conv.name][r.filter, r.channel] = False
        return masks


def global_threshold(records: list[StrengthRecord], sparsity: float,
                     kind: str = "synaptic") -> tuple[float, PrunePlan]:
    """Prune exactly floor(sparsity * M) kernels with the smallest indicators.

    The threshold is the m-th smallest value (0 when m = 0).  Everything
    below it is pruned; ties at the threshold go in ascending
    (layer, filter, channel) order until the count is exact.
    """
    m = prune_count(sparsity, len(records))
    if m == 0:
        return 0.0, PrunePlan(kind, sparsity, 0.0, [], len(records))
    values = np.array([r.value for r in records], dtype=np.float64)
    keys = np.array([(r.layer, r.filter, r.channel) for r in records], dtype=np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0], values))
    chosen = order[:m]
    tau = float(values[order[m - 1]])
    pruned = sorted((records[i] for i in chosen), key=lambda r: (r.layer, r.filter, r.channel))
    return tau, PrunePlan(kind, sparsity, tau, pruned, len(records))


def make_plan(net: Network, sparsity: float, kind: str = "synaptic") -> PrunePlan:
    return global_threshold(collect_indicators(net, kind), sparsity, kind)[1]


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

@dataclass
class LayerAccount:
    name: str
    kernels: int
    pruned: int
    kernel_size: int
    out_positions: int
    dead_filters: int = 0

    @property
    def remaining(self) -> int:
        return self.kernels - self.pruned

    @property
    def pruned_pct(self) -> float:
        return 100.0 * self.pruned / self.kernels if self.kernels else 0.0

    @property
    def params_dense(self) -> int:
        return self.kernels * self.kernel_size

    @property
    def params_sparse(self) -> int:
        return self.remaining * self.kernel_size

    @property
    def macs_dense(self) -> int:
        return self.params_dense * self.out_positions

    @property
    def macs_sparse(self) -> int:
        return self.params_sparse * self.out_positions

    @property
    def flops_dense(self) -> int:
        return 2 * self.macs_dense

    @property
    def flops_sparse(self) -> int:
        return 2 * self.macs_sparse


REPORT_COLUMNS = ["layer", "kernels", "pruned", "pruned_pct", "params_dense", "params_sparse",
                  "macs_dense", "macs_sparse", "flops_dense", "flops_sparse", "dead_filters"]


@dataclass
class AccountingReport:
    """Kernel, parameter and convolution FLOP counts (2 FLOPs per MAC)."""

    layers: list[LayerAccount] = field(default_factory=list)

    def total(self, attr: str) -> int:
        return sum(getattr(l, attr) for l in self.layers)

    @property
    def kernels(self) -> int:
        return self.total("kernels")

    @property
    def pruned(self) -> int:
        return self.total("pruned")

    @property
    def remaining(self) -> int:
        return self.kernels - self.pruned

    @property
    def pruned_pct(self) -> float:
        return 100.0 * self.pruned / self.kernels if self.kernels else 0.0

    @property
    def flops_dense(self) -> int:
        return self.total("flops_dense")

    @property
    def flops_sparse(self) -> int:
        return self.total("flops_sparse")

    @property
    def flops_pruned_pct(self) -> float:
        return 100.0 * (1 - self.flops_sparse / self.flops_dense) if self.flops_dense else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(REPORT_COLUMNS)
        rows = [(l.name, l) for l in self.layers]
        for name, l in rows:
            w.writerow([name, l.kernels, l.pruned, f"{l.pruned_pct:.2f}", l.params_dense, l.params_sparse,
                        l.macs_dense, l.macs_sparse, l.flops_dense, l.flops_sparse, l.dead_filters])
        w.writerow(["total", self.kernels, self.pruned, f"{self.pruned_pct:.2f}",
                    self.total("params_dense"), self.total("params_sparse"), self.total("macs_dense"),
                    self.total("macs_sparse"), self.flops_dense, self.flops_sparse,
                    self.total("dead_filters")])
        return buf.getvalue()


def conv_geometry(net: Network, input_hw: tuple[int, int]) -> dict[str, tuple[int, int]]:
    """Output spatial extent of every conv for an input of size ``input_hw``."""
    out: dict[str, tuple[int, int]] = {}

    def conv_hw(d, hw):
        ho, wo = conv_output_shape(hw[0], hw[1], d["kernel"], d["kernel"], d["stride"], d["padding"])
        out[d["name"]] = (ho, wo)
        return ho, wo

    def walk(descs, hw):
        for d in descs:
            if d["op"] == "conv":
                hw = conv_hw(d, hw)
            elif d["op"] == "residual":
                start = hw
                hw = walk(d["body"], hw)
                if d["shortcut"] is not None:
                    conv_hw(d["shortcut"], start)
            elif d["op"] == "gap":
                hw = (1, 1)
        return hw

    walk(net.spec, tuple(input_hw))
    return out


def count_flops(net: Network, input_hw: tuple[int, int]) -> AccountingReport:
    geo = conv_geometry(net, input_hw)
    report = AccountingReport()
    for conv, _ in net.conv_layers():
        ho, wo = geo[conv.name]
        report.layers.append(LayerAccount(conv.name, conv.mask.size, int((~conv.mask).sum()),
                                          conv.kernel_size ** 2, ho * wo, int((~conv.mask.any(axis=1)).sum())))
    return report


def apply_prune(net: Network, plan: PrunePlan, input_hw: tuple[int, int] = (28, 28)) -> tuple[Network, AccountingReport]:
    """Zero and freeze the planned kernels (in place) and account the result."""
    net.set_masks(plan.masks_for(net))
    return net, count_flops(net, input_hw)


TABLE_COLUMNS = ["model", "error%", "kernels", "pruned%", "flops", "flops_pruned%"]


def table_rows_csv(rows: list[tuple[str, float, AccountingReport]]) -> str:
    """Error / remaining kernels / FLOPs summary, one row per model."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(TABLE_COLUMNS)
    for name, error_pct, rep in rows:
        w.writerow([name, f"{error_pct:.2f}", rep.remaining, f"{rep.pruned_pct:.2f}",
                    rep.flops_sparse, f"{rep.flops_pruned_pct:.2f}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# sensitivity
# ---------------------------------------------------------------------------

DEFAULT_GRID = (0.70, 0.80, 0.90, 0.95, 0.975)


@dataclass
class SweepArm:
    """Trained, unpruned networks (by seed) pruned with one indicator."""

    label: str
    indicator: str
    models: dict[int, Network]


@dataclass
class SensitivityResult:
    rows: list[dict] = field(default_factory=list)

    def drops(self, label: str, sparsity: float) -> list[float]:
        return [r["drop"] for r in self.rows if r["label"] == label and r["sparsity"] == sparsity]

    def mean_drop(self, label: str, sparsity: float) -> float:
        return float(np.mean(self.drops(label, sparsity)))

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["label", "indicator", "sparsity", "seed", "base_acc", "pruned_acc", "final_acc", "drop"])
        for r in self.rows:
            w.writerow([r["label"], r["indicator"], f"{100 * r['sparsity']:.1f}", r["seed"],
                        f"{100 * r['base_acc']:.2f}", f"{100 * r['pruned_acc']:.2f}",
                        f"{100 * r['final_acc']:.2f}", f"{r['drop']:.2f}"])
        return buf.getvalue()

    def curve_csv(self) -> str:
        """Mean, sample std, min and max accuracy drop (points) per (label, sparsity)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["label", "sparsity", "mean_drop", "std_drop", "min_drop", "max_drop", "n"])
        keys = []
        for r in self.rows:
            if (r["label"], r["sparsity"]) not in keys:
                keys.append((r["label"], r["sparsity"]))
        for label, sp in keys:
            d = np.array(self.drops(label, sp))
            std = float(d.std(ddof=1)) if len(d) > 1 else 0.0
            w.writerow([label, f"{100 * sp:.1f}", f"{d.mean():.3f}", f"{std:.3f}",
                        f"{d.min():.3f}", f"{d.max():.3f}", len(d)])
        return buf.getvalue()


def sensitivity_sweep(arms: list[SweepArm], data, sparsities=DEFAULT_GRID, cfg=None,
                      finetune: bool = True, on_model=None) -> SensitivityResult:
    """Prune every arm's models at each sparsity, optionally finetune, and
    record the accuracy drop (percentage points) against the unpruned model.

    ``on_model(arm, seed, sparsity, net, plan)`` sees every final network;
    at sparsity 0 it receives an unmodified copy and ``plan`` is None.
    """
    from .training import finetune as run_finetune

    result = SensitivityResult()
    for arm in arms:
        for seed, model in arm.models.items():
            x_test = data.x_test.astype(model.dtype, copy=False)
            base = model.accuracy(x_test, data.y_test)
            for sp in sparsities:
                if sp == 0:
                    result.rows.append({"label": arm.label, "indicator": arm.indicator, "sparsity": sp,
                                        "seed": seed, "base_acc": base, "pruned_acc": base,
                                        "final_acc": base, "drop": 0.0})
                    if on_model is not None:
                        on_model(arm, seed, sp, model.copy(), None)
                    continue
                net = model.copy()
                plan = make_plan(net, sp, arm.indicator)
                apply_prune(net, plan)
                pruned_acc = net.accuracy(x_test, data.y_test)
                final = pruned_acc
                if finetune and cfg is not None:
                    net, _ = run_finetune(net, data, cfg.replace(seed=seed))
                    final = net.accuracy(x_test, data.y_test)
                drop = 100.0 * (base - final)
                logger.info("%s seed %d sparsity %.3f: base %.4f pruned %.4f final %.4f",
                            arm.label, seed, sp, base, pruned_acc, final)
                result.rows.append({"label": arm.label, "indicator": arm.indicator, "sparsity": sp,
                                    "seed": seed, "base_acc": base, "pruned_acc": pruned_acc,
                                    "final_acc": final, "drop": drop})
                if on_model is not None:
                    on_model(arm, seed, sp, net, plan)
    return result
