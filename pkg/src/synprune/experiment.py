"""End-to-end experiment: baseline, lambda sweep, regularized training,
pruning + finetuning, accounting, sensitivity curves, BCSR export and bench.

Every stage writes into ``output_dir`` and drops a marker holding the config
hash; rerunning with the same config resumes after the last finished stage.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentPolicy, Dataset, load_dataset
from .layers import Network, desknet_spec
from .pruning import (DEFAULT_GRID, SensitivityResult, SweepArm, apply_prune, count_flops, make_plan,
                      sensitivity_sweep, table_rows_csv)
from .sparse import bench, export_bcsr, write_sbcr
from .training import (TrainConfig, config_from_mapping, finetune, parse_key_values, sweep_lambda,
                       train)

logger = logging.getLogger(__name__)

EXIT_CONFIG, EXIT_DATA = 2, 3
STAGE_CODES = {"baseline": 10, "sweep": 11, "regularized": 12, "ssl": 13, "prune": 14,
               "sensitivity": 15, "ablation": 16, "export": 17, "bench": 18}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, code: int | None = None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.code = code if code is not None else STAGE_CODES.get(stage, 1)


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.replace(" ", "").split(",") if x)


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(" ", "").split(",") if x)


def _strs(v: str) -> tuple[str, ...]:
    return tuple(x for x in v.replace(" ", "").split(",") if x)


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_path: str = "data/mnist"
    model: str = "desknet"
    width: int = 32
    first_stride: int = 1
    output_dir: str = "runs/desk"
    seeds: tuple[int, ...] = (0, 1, 2)
    prune_grid: tuple[float, ...] = DEFAULT_GRID
    report_sparsity: float = 0.8
    indicators: tuple[str, ...] = ("synaptic", "ssl_mean_abs")
    ablations: tuple[str, ...] = ()
    ablation_grid: tuple[float, ...] = (0.6, 0.7, 0.8, 0.9)
    sweep: bool = True
    bench_sparsity: float = 0.96
    bench_repetitions: int = 3
    bench_batch: int = 8
    train_subset: int | None = None
    test_subset: int | None = None
    augment_flip_prob: float | None = None
    augment_crop_pad: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    _PARSERS = {"seeds": _ints, "prune_grid": _floats, "indicators": _strs, "ablations": _strs,
                "ablation_grid": _floats}

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ExperimentConfig":
        own = {f.name: f for f in dataclasses.fields(cls) if f.name != "train"}
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        kwargs, train_values = {}, {}
        for key, value in values.items():
            if key in cls._PARSERS:
                kwargs[key] = cls._PARSERS[key](value)
            elif key in own:
                t = str(own[key].type)
                if value.lower() == "none":
                    kwargs[key] = None
                elif t.startswith("bool"):
                    kwargs[key] = value.lower() in ("1", "true", "yes", "on")
                elif t.startswith("int"):
                    kwargs[key] = int(value)
                elif t.startswith("float"):
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = value
            elif key in train_keys:
                train_values[key] = value
            else:
                raise KeyError(f"unknown config key {key!r}")
        cfg = cls(**kwargs, train=config_from_mapping(TrainConfig, train_values))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        values = parse_key_values(Path(path).read_text(encoding="utf-8"))
        values.update(overrides or {})
        return cls.from_mapping(values)

    def validate(self) -> None:
        if self.model != "desknet":
            raise ValueError(f"unknown model spec {self.model!r}")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        for kind in self.indicators:
            if kind not in ("synaptic", "ssl_mean_abs"):
                raise ValueError(f"unknown indicator {kind!r}")
        for name in self.ablations:
            if name not in ("non_fix_gamma", "non_kernel_norm"):
                raise ValueError(f"unknown ablation {name!r}")

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = dataclasses.asdict(self.train)
        return d

    def digest(self) -> str:
        d = self.as_dict()
        d.pop("output_dir")
        d.pop("bench_repetitions")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


class Experiment:
    def __init__(self, cfg: ExperimentConfig, data: Dataset | None = None):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.digest = cfg.digest()
        self.manifest: list[tuple[str, str, str, str]] = []
        self._data = data
        self.results: dict = {}
        self.timings: dict[str, float] = {}

    @contextmanager
    def _timed(self, stage: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - t0

    # -- plumbing ----------------------------------------------------------

    @property
    def data(self) -> Dataset:
        if self._data is None:
            try:
                aug = None
                if self.cfg.augment_flip_prob is not None or self.cfg.augment_crop_pad is not None:
                    default = AugmentPolicy(0.0, 2) if self.cfg.dataset == "mnist" else AugmentPolicy()
                    aug = AugmentPolicy(
                        default.flip_prob if self.cfg.augment_flip_prob is None else self.cfg.augment_flip_prob,
                        default.crop_pad if self.cfg.augment_crop_pad is None else self.cfg.augment_crop_pad)
                data = load_dataset(self.cfg.dataset, self.cfg.data_path, aug)
            except (OSError, ValueError) as exc:
                raise StageError("data", str(exc), EXIT_DATA) from exc
            self._data = data.subset(self.cfg.train_subset, self.cfg.test_subset)
        return self._data

    @property
    def spec(self) -> list[dict]:
        c = self.data.x_train.shape[1]
        return desknet_spec(c, self.data.num_classes, self.cfg.width, self.cfg.first_stride)

    @property
    def input_hw(self) -> tuple[int, int]:
        return tuple(self.data.x_train.shape[2:])

    def _marker(self, stage: str) -> Path:
        return self.out / "stages" / f"{stage}.done"

    def _done(self, stage: str) -> bool:
        m = self._marker(stage)
        return m.exists() and m.read_text() == self.digest

    def _finish(self, stage: str) -> None:
        m = self._marker(stage)
        m.parent.mkdir(parents=True, exist_ok=True)
        m.write_text(self.digest)

    def _write(self, rel: str, text: str, seed="", stage="") -> None:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="")
        self._record(rel, seed, stage)

    def _record(self, rel: str, seed, stage: str) -> None:
        entry = (rel, self.digest, str(seed), stage)
        if entry not in self.manifest:
            self.manifest.append(entry)

    def _save(self, net: Network, rel: str, seed, stage: str, plan=None) -> None:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, path, {"config_hash": self.digest, "seed": seed, "stage": stage}, plan)
        self._record(rel, seed, stage)

    def _train_stage(self, stage: str, rel: str, seed: int, variant: str, tcfg: TrainConfig) -> Network:
        key = f"{stage}_s{seed}"
        if self._done(key):
            self._record(rel, seed, stage)
            self._record(rel.replace(".synp", "_history.csv"), seed, stage)
            return load_checkpoint(self.out / rel)[0]
        try:
            with self._timed(stage):
                net = Network(self.spec, variant, seed=seed, dtype=tcfg.dtype)
                net, hist = train(net, self.data, tcfg.replace(seed=seed))
        except (ValueError, FloatingPointError) as exc:
            raise StageError(stage, f"seed {seed}: {exc}") from exc
        self._save(net, rel, seed, stage)
        self._write(rel.replace(".synp", "_history.csv"), hist.to_csv(), seed, stage)
        self._finish(key)
        return net

    # -- stages ------------------------------------------------------------

    def baselines(self) -> dict[int, Network]:
        t = self.cfg.train.replace(lam=0.0)
        return {s: self._train_stage("baseline", f"seed{s}/baseline.synp", s, "synaptic", t)
                for s in self.cfg.seeds}

    def choose_lambda(self, baseline: Network) -> tuple[float, Network | None]:
        seed = self.cfg.seeds[0]
        rel = f"seed{seed}/regularized.synp"
        if not self.cfg.sweep:
            return self.cfg.train.lam, None
        if self._done("sweep"):
            lam = float(json.loads((self.out / "lambda.json").read_text())["lam"])
            self._record("lambda_sweep.csv", seed, "sweep")
            self._record("lambda.json", seed, "sweep")
            self._record(rel, seed, "regularized")
            return lam, load_checkpoint(self.out / rel)[0]
        base_acc = baseline.accuracy(self.data.x_test.astype(baseline.dtype), self.data.y_test)
        try:
            with self._timed("sweep"):
                res = sweep_lambda(self.spec, self.data, self.cfg.train.replace(seed=seed), base_acc)
        except (ValueError, FloatingPointError) as exc:
            raise StageError("sweep", str(exc)) from exc
        if res.chosen is None:
            raise StageError("sweep", f"lambda_start={self.cfg.train.lambda_start:g} already loses "
                                      f"more than {self.cfg.train.lambda_tolerance} points")
        self._write("lambda_sweep.csv", res.to_csv(), seed, "sweep")
        self._write("lambda.json", json.dumps({"lam": res.chosen_lam}, sort_keys=True), seed, "sweep")
        self._save(res.chosen, rel, seed, "regularized")
        self._finish("sweep")
        return res.chosen_lam, res.chosen

    def regularized(self, lam: float, first: Network | None) -> dict[int, Network]:
        t = self.cfg.train.replace(lam=lam)
        out = {}
        for s in self.cfg.seeds:
            if s == self.cfg.seeds[0] and first is not None:
                out[s] = first
                continue
            out[s] = self._train_stage("regularized", f"seed{s}/regularized.synp", s, "synaptic", t)
        return out

    def ssl_models(self, lam: float) -> dict[int, Network]:
        t = self.cfg.train.replace(lam=lam, regularizer="group_lasso", fix_gamma=False, kernel_norm=False)
        return {s: self._train_stage("ssl", f"seed{s}/ssl.synp", s, "standard", t) for s in self.cfg.seeds}

    def ablation_models(self, name: str, lam: float) -> dict[int, Network]:
        t = self.cfg.train.replace(lam=lam)
        return {s: self._train_stage("ablation", f"seed{s}/{name}.synp", s, name, t) for s in self.cfg.seeds}

    def run(self) -> dict:
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        self._write("config.json", json.dumps(cfg.as_dict(), sort_keys=True, indent=1), "", "config")
        data = self.data

        base = self.baselines()
        lam, first = self.choose_lambda(base[cfg.seeds[0]])
        reg = self.regularized(lam, first)
        self.results.update(lam=lam, baseline=base, regularized=reg)

        arms = [SweepArm("synaptic", "synaptic", reg)]
        if "ssl_mean_abs" in cfg.indicators:
            arms.append(SweepArm("ssl", "ssl_mean_abs", self.ssl_models(lam)))
        if "synaptic" not in cfg.indicators:
            arms = arms[1:]

        grid = tuple(sorted(set(cfg.prune_grid) | {cfg.report_sparsity}))
        sens = self._sensitivity(arms, grid)
        self.results["sensitivity"] = sens
        self._accounting(base, reg, sens)

        if cfg.ablations:
            abl_arms = [SweepArm("full", "synaptic", reg)]
            abl_arms += [SweepArm(n, "synaptic", self.ablation_models(n, lam)) for n in cfg.ablations]
            if self._done("ablation"):
                self._record("ablation.csv", "", "ablation")
                self._record("ablation_rows.csv", "", "ablation")
            else:
                abl = sensitivity_sweep(abl_arms, data, cfg.ablation_grid, finetune=False)
                self._write("ablation.csv", abl.curve_csv(), "", "ablation")
                self._write("ablation_rows.csv", abl.rows_csv(), "", "ablation")
                self._finish("ablation")
                self.results["ablation"] = abl

        self._export_and_bench(reg)
        self._write_timings()
        self._write("manifest.csv", _csv_text(["artifact", "config_hash", "seed", "stage"],
                                              sorted(self.manifest)))
        return self.results

    def _write_timings(self) -> None:
        """Wall-clock seconds per stage; stages skipped on resume keep their old value."""
        path = self.out / "timings.csv"
        merged = {}
        if path.exists():
            merged = {r["stage"]: float(r["seconds"]) for r in csv.DictReader(io.StringIO(path.read_text()))}
        merged.update(self.timings)
        self._write("timings.csv", _csv_text(["stage", "seconds"],
                                             [(k, f"{v:.1f}") for k, v in sorted(merged.items())]))

    @staticmethod
    def _pruned_rel(seed: int, sparsity: float) -> str:
        return f"seed{seed}/pruned_{100 * sparsity:g}.synp"

    def _sensitivity(self, arms: list[SweepArm], grid) -> SensitivityResult:
        if self._done("sensitivity"):
            rows = list(csv.DictReader(io.StringIO((self.out / "sensitivity_rows.csv").read_text())))
            res = SensitivityResult([{
                "label": r["label"], "indicator": r["indicator"], "sparsity": float(r["sparsity"]) / 100,
                "seed": int(r["seed"]), "base_acc": float(r["base_acc"]) / 100,
                "pruned_acc": float(r["pruned_acc"]) / 100, "final_acc": float(r["final_acc"]) / 100,
                "drop": float(r["drop"])} for r in rows])
            for rel in ("sensitivity.csv", "sensitivity_rows.csv"):
                self._record(rel, "", "sensitivity")
            if "synaptic" in self.cfg.indicators:
                for s in self.cfg.seeds:
                    for sp in grid:
                        self._record(self._pruned_rel(s, sp), s, "prune")
            return res
        last = [time.perf_counter()]

        def keep(arm, seed, sp, net, plan):
            now = time.perf_counter()
            self.timings[f"prune_{arm.label}"] = self.timings.get(f"prune_{arm.label}", 0.0) + now - last[0]
            last[0] = now
            if arm.label == "synaptic":
                self._save(net, self._pruned_rel(seed, sp), seed, "prune", plan)

        try:
            res = sensitivity_sweep(arms, self.data, grid, self.cfg.train, on_model=keep)
        except (ValueError, FloatingPointError) as exc:
            raise StageError("sensitivity", str(exc)) from exc
        self._write("sensitivity.csv", res.curve_csv(), "", "sensitivity")
        self._write("sensitivity_rows.csv", res.rows_csv(), "", "sensitivity")
        self._finish("sensitivity")
        return res

    def _accounting(self, base, reg, sens: SensitivityResult) -> None:
        rows = []
        hw = self.input_hw
        xt = self.data.x_test
        for s in self.cfg.seeds:
            b = base[s]
            rows.append((f"desknet-s{s} base", 100 * (1 - b.accuracy(xt.astype(b.dtype), self.data.y_test)),
                         count_flops(b, hw)))
            r = reg[s]
            rows.append((f"desknet-s{s} regularized",
                         100 * (1 - r.accuracy(xt.astype(r.dtype), self.data.y_test)), count_flops(r, hw)))
            for row in sens.rows:
                if row["label"] != "synaptic" or row["seed"] != s or row["sparsity"] == 0:
                    continue
                net = r.copy()
                _, rep = apply_prune(net, make_plan(net, row["sparsity"], "synaptic"), hw)
                rows.append((f"desknet-s{s} pruned {100 * row['sparsity']:g}%",
                             100 * (1 - row["final_acc"]), rep))
                if s == self.cfg.seeds[0] and row["sparsity"] == self.cfg.report_sparsity:
                    self._write(f"accounting_layers_{100 * row['sparsity']:g}.csv", rep.to_csv(), s, "prune")
        self._write("accounting.csv", table_rows_csv(rows), "", "prune")

    def _export_and_bench(self, reg: dict[int, Network]) -> None:
        seed = self.cfg.seeds[0]
        (self.out / "exports").mkdir(parents=True, exist_ok=True)
        try:
            rel = self._pruned_rel(seed, self.cfg.report_sparsity)
            if (self.out / rel).exists():
                net = load_checkpoint(self.out / rel)[0]
            else:
                net = reg[seed].copy()
                apply_prune(net, make_plan(net, self.cfg.report_sparsity, "synaptic"), self.input_hw)
                net, _ = finetune(net, self.data, self.cfg.train.replace(seed=seed))
            write_sbcr(export_bcsr(net), self.out / f"exports/pruned_{100 * self.cfg.report_sparsity:g}.sbcr")
            self._record(f"exports/pruned_{100 * self.cfg.report_sparsity:g}.sbcr", seed, "export")
            dense96 = reg[seed].copy()
            apply_prune(dense96, make_plan(dense96, self.cfg.bench_sparsity, "synaptic"), self.input_hw)
            model = export_bcsr(dense96)
            rel = f"exports/pruned_{100 * self.cfg.bench_sparsity:g}.sbcr"
            write_sbcr(model, self.out / rel)
            self._record(rel, seed, "export")
        except (OSError, ValueError) as exc:
            raise StageError("export", str(exc)) from exc
        try:
            shape = (self.cfg.bench_batch, *self.data.x_train.shape[1:])
            rep = bench(model, shape, self.cfg.bench_repetitions)
        except ValueError as exc:
            raise StageError("bench", str(exc)) from exc
        self._write("bench.csv", rep.to_csv(), seed, "bench")


def run_experiment(config, overrides: dict[str, str] | None = None, data: Dataset | None = None) -> Path:
    """Run every stage for a config file (or ExperimentConfig); returns the output directory."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config, overrides)
    exp = Experiment(cfg, data)
    exp.run()
    return exp.out
