"""SGD training with an L1 penalty on kernel strengths, finetuning, lambda sweep."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, augment
from .layers import Network, synaptic_strength

logger = logging.getLogger(__name__)

REGULARIZERS = ("strength", "group_lasso")


@dataclass
class TrainConfig:
    lam: float = 0.0
    lr: float = 0.1
    milestones: tuple[int, ...] = (30, 45)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 60
    seed: int = 0
    precision: str = "float32"
    fix_gamma: bool = True
    kernel_norm: bool = True
    regularizer: str = "strength"
    finetune_epochs: int | None = None
    lambda_start: float = 1e-5
    lambda_factor: float = math.sqrt(10.0)
    lambda_tolerance: float = 0.5
    lambda_max_steps: int = 6

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.validate()

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.milestones and self.epochs and self.milestones[-1] >= self.epochs:
            raise ValueError("milestones must be < epochs")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    @property
    def final_lr(self) -> float:
        return self.lr * 0.1 ** len(self.milestones)

    @property
    def n_finetune_epochs(self) -> int:
        if self.finetune_epochs is not None:
            return self.finetune_epochs
        return max(1, round(0.2 * self.epochs)) if self.epochs else 0

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.1 ** sum(epoch >= m for m in self.milestones)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(value: str, annotation: str):
    value = value.strip()
    if "tuple" in annotation:
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    if annotation.startswith("bool"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if annotation.startswith("int"):
        return None if value.lower() == "none" else int(value)
    if annotation.startswith("float"):
        return float(value)
    return value


def parse_key_values(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def config_from_mapping(cls, values: dict[str, str], strict: bool = True):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in fields:
            if strict:
                raise KeyError(f"unknown {cls.__name__} key {key!r}")
            continue
        kwargs[key] = _coerce(value, str(fields[key].type))
    return cls(**kwargs)


def load_train_config(path, overrides: dict[str, str] | None = None) -> TrainConfig:
    values = parse_key_values(Path(path).read_text(encoding="utf-8"))
    values.update(overrides or {})
    return config_from_mapping(TrainConfig, values, strict=False)


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    reg_term: float
    train_acc: float
    test_acc: float
    min_strength: float
    median_strength: float


HISTORY_COLUMNS = [f.name for f in dataclasses.fields(EpochRecord)]


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch] + [f"{getattr(r, c):.6f}" for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="")


# ---------------------------------------------------------------------------
# objective and optimizer
# ---------------------------------------------------------------------------

def l1_subgradient(s):
    """sign(s), with 0 chosen at s == 0."""
    return np.sign(s)


def strength_indicators(net: Network) -> np.ndarray:
    """Flat array of unmasked per-kernel strengths across the network."""
    vals = [synaptic_strength(conv, bn)[conv.mask] for conv, bn in net.conv_layers()]
    return np.concatenate(vals) if vals else np.zeros(0)


def uses_direct_l1(net: Network, cfg: TrainConfig) -> bool:
    """True when the penalty is exactly lam * sum|s| over strength parameters."""
    return net.variant == "synaptic" and cfg.regularizer == "strength"


def regularization(net: Network, regularizer: str = "strength") -> T.Tensor:
    """Differentiable penalty: sum of |strength| over unmasked kernels, or the
    group lasso sum of raw kernel norms."""
    total = None
    if regularizer == "group_lasso":
        terms = [(conv, T.kernel_norms(conv.effective_kernels())) for conv, _ in net.conv_layers()]
    else:
        terms = net.strength_terms()
    for conv, s in terms:
        s = T.mul(s, T.Tensor(conv.mask.astype(s.dtype)))
        part = T.tsum(T.abs_(s))
        total = part if total is None else T.add(total, part)
    return total


def objective(net: Network, x: np.ndarray, y: np.ndarray, lam: float, training: bool = True,
              regularizer: str = "strength") -> tuple[T.Tensor, dict[str, float]]:
    """Mean cross-entropy plus ``lam`` times the strength penalty."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    ce = T.softmax_cross_entropy(net.forward(x, training), y)
    reg = regularization(net, regularizer)
    loss = ce if lam == 0 else T.add(ce, T.mul(reg, T.Tensor(np.asarray(lam, ce.dtype))))
    return loss, {"classification": float(ce.data), "reg_term": float(reg.data)}


class SGD:
    """Momentum SGD: ``v = m*v + (g + wd*theta)``, ``theta -= lr*v``.

    Strength parameters receive ``l1 * sign(s)`` instead of weight decay.
    Pruned entries keep zero gradient, zero velocity and zero value.
    """

    def __init__(self, net: Network, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.net = net
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[int, np.ndarray] = {}
        self.audit: dict[str, set[str]] = {"weight_decay": set(), "l1": set()}

    def step(self, grads: dict[T.Tensor, np.ndarray], lr: float, l1: float = 0.0) -> None:
        masks = {}
        for conv, _ in self.net.conv_layers():
            for p in conv.parameters():
                masks[id(p)] = conv.mask if p.data.ndim == 2 else conv.mask[:, :, None, None]
        for p in self.net.parameters():
            g = grads.get(p)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {p.name}")
            if p.kind == "strength":
                if l1:
                    g = g + l1 * l1_subgradient(p.data)
                    self.audit["l1"].add(p.name)
            elif self.weight_decay:
                g = g + self.weight_decay * p.data
                self.audit["weight_decay"].add(p.name)
            m = masks.get(id(p))
            if m is not None:
                g = g * m
            v = self.velocity.get(id(p))
            v = g.copy() if v is None else self.momentum * v + g
            if m is not None:
                v = v * m
            self.velocity[id(p)] = v
            p.data = (p.data - lr * v).astype(p.dtype, copy=False)
        for conv, _ in self.net.conv_layers():
            conv.renormalize()
            conv.zero_masked()


def sgd_step(net: Network, grads, cfg: TrainConfig, epoch: int, optimizer: SGD | None = None) -> SGD:
    """One update at the scheduled learning rate for ``epoch``."""
    opt = optimizer or SGD(net, cfg.momentum, cfg.weight_decay)
    l1 = cfg.lam if uses_direct_l1(net, cfg) else 0.0
    opt.step(grads, cfg.lr_at(epoch), l1)
    return opt


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def _batch_grads(net: Network, xb, yb, cfg: TrainConfig, params):
    direct = uses_direct_l1(net, cfg)
    with T.Graph() as g:
        logits = net.forward(xb, training=True)
        loss = T.softmax_cross_entropy(logits, yb)
        total = loss
        if cfg.lam and not direct:
            reg = regularization(net, cfg.regularizer)
            total = T.add(loss, T.mul(reg, T.Tensor(np.asarray(cfg.lam, loss.dtype))))
    grads = g.backward(total, params)
    return float(loss.data), logits.data, grads


def train(net: Network, data: Dataset, cfg: TrainConfig, keep_best: bool = True,
          lr_override: float | None = None) -> tuple[Network, TrainHistory]:
    """Minibatch SGD over ``cfg.epochs`` epochs, evaluating on the test split each epoch.

    The network is updated in place; when ``keep_best`` the state with the
    highest test accuracy (latest on ties) is restored at the end.
    """
    history = TrainHistory()
    if cfg.epochs == 0:
        return net, history
    n = len(data.y_train)
    if n == 0:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(net, cfg.momentum, cfg.weight_decay)
    params = net.parameters()
    direct_l1 = cfg.lam if uses_direct_l1(net, cfg) else 0.0
    best_acc, best_state = -1.0, None
    fill = data.pad_value
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch) if lr_override is None else lr_override
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = data.x_train[idx]
            if data.augmentation.enabled:
                xb = augment(xb, data.augmentation, rng, fill)
            yb = data.y_train[idx]
            loss, logits, grads = _batch_grads(net, xb.astype(cfg.dtype, copy=False), yb, cfg, params)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            opt.step(grads, lr, direct_l1)
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == yb).sum())
        ind = strength_indicators(net)
        reg = float(np.sum(ind))
        test_acc = net.accuracy(data.x_test.astype(cfg.dtype, copy=False), data.y_test)
        rec = EpochRecord(epoch, loss_sum / n, reg, correct / n, test_acc,
                          float(ind.min()) if ind.size else 0.0,
                          float(np.median(ind)) if ind.size else 0.0)
        history.records.append(rec)
        logger.info("epoch %d lr %.4g loss %.4f reg %.4f train %.4f test %.4f", epoch, lr,
                    rec.loss, reg, rec.train_acc, test_acc)
        if keep_best and test_acc >= best_acc:
            best_acc, best_state = test_acc, net.state_dict()
    if keep_best and best_state is not None:
        net.load_state_dict(best_state)
    return net, history


def finetune(net: Network, data: Dataset, cfg: TrainConfig,
             masks: dict[str, np.ndarray] | None = None) -> tuple[Network, TrainHistory]:
    """Retrain a pruned network without the penalty at the final learning rate.

    Pruned kernels stay frozen at zero.
    """
    if masks is not None:
        net.set_masks(masks)
    ft = cfg.replace(lam=0.0, epochs=cfg.n_finetune_epochs, milestones=())
    return train(net, data, ft, lr_override=cfg.final_lr)


@dataclass
class LambdaSweepResult:
    baseline_acc: float
    rows: list[dict]
    chosen_lam: float
    chosen: Network | None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["lam", "test_acc", "reg_term", "within_tolerance"])
        for r in self.rows:
            w.writerow([f"{r['lam']:.6g}", f"{r['test_acc']:.6f}", f"{r['reg_term']:.6f}",
                        int(r["within_tolerance"])])
        return buf.getvalue()


def sweep_lambda(spec: list[dict], data: Dataset, cfg: TrainConfig, baseline_acc: float,
                 variant: str = "synaptic") -> LambdaSweepResult:
    """Grow lambda geometrically until test accuracy falls more than
    ``lambda_tolerance`` points below ``baseline_acc``.

    The largest lambda still within tolerance is chosen, together with its
    trained network (None if even the first lambda fails).
    """
    rows, chosen_lam, chosen = [], 0.0, None
    lam = cfg.lambda_start
    for _ in range(cfg.lambda_max_steps):
        net = Network(spec, variant, seed=cfg.seed, dtype=cfg.dtype)
        net, hist = train(net, data, cfg.replace(lam=lam))
        acc = max(r.test_acc for r in hist.records) if hist.records else 0.0
        ok = acc * 100 >= baseline_acc * 100 - cfg.lambda_tolerance
        rows.append({"lam": lam, "test_acc": acc, "reg_term": float(np.sum(strength_indicators(net))),
                     "within_tolerance": ok})
        logger.info("lambda %.3g: acc %.4f (baseline %.4f) %s", lam, acc, baseline_acc,
                    "ok" if ok else "stop")
        if not ok:
            break
        chosen_lam, chosen = lam, net
        lam *= cfg.lambda_factor
    return LambdaSweepResult(baseline_acc, rows, chosen_lam, chosen)
