"""Teacher-to-student knowledge distillation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .data import Batch, LabeledDataset
from .losses import Objective, kd_loss
from .model import ModelConfig, ModelParams, forward
from .tensor import Tensor
from .trainer import (PassResult, RunReport, TrainConfig, evaluate, median_run, predict_pass,
                      run_loop, write_epoch_csv)


class DistillConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    alphas: tuple[float, ...] = (0.05, 0.5, 0.9)
    temperatures: tuple[float, ...] = (1.0, 2.0, 5.0)
    epochs: int = 10
    runs_per_config: int = 3
    seed: int = 0
    batch_size: int = 32
    lr: float = 3e-4
    optimizer: str = "adam"
    metric: str = "accuracy"
    eval_batch_size: int = 256
    teacher_checkpoint: str | None = None
    baseline_teacher_checkpoint: str | None = None
    sweep_summary: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "temperatures", tuple(float(t) for t in self.temperatures))
        if not self.alphas or not self.temperatures:
            raise DistillConfigError("alpha and temperature grids must be nonempty")
        for a in self.alphas:
            if not 0.0 <= a <= 1.0:
                raise DistillConfigError(f"alpha {a} outside [0, 1]")
        for t in self.temperatures:
            if not (math.isfinite(t) and t >= 1.0):
                raise DistillConfigError(f"temperature {t} must be >= 1")
        if self.epochs < 1 or self.runs_per_config < 1:
            raise DistillConfigError("epochs and runs_per_config must be >= 1")

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=seed,
                           optimizer=self.optimizer, metric=self.metric,
                           eval_batch_size=self.eval_batch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alphas"], d["temperatures"] = list(self.alphas), list(self.temperatures)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise DistillConfigError(f"unknown distill keys: {sorted(unknown)}")
        return cls(**d)


def init_student(teacher: ModelParams) -> ModelParams:
    """Student with ceil(L/2) blocks: block j copies teacher block 2j.

    Embeddings, the final norm and the classifier are copied whole.
    """
    tcfg = teacher.config
    if tcfg.num_layers < 2:
        raise DistillConfigError(f"teacher needs >= 2 layers to halve, has {tcfg.num_layers}")
    n_student = math.ceil(tcfg.num_layers / 2)
    scfg = ModelConfig(**{**tcfg.to_dict(), "num_layers": n_student})
    tensors = {}
    for name, t in teacher.tensors.items():
        if name.startswith("blocks."):
            _, idx, rest = name.split(".", 2)
            if int(idx) % 2:
                continue
            name = f"blocks.{int(idx) // 2}.{rest}"
        tensors[name] = Tensor(t.data, requires_grad=True, name=name)
    return ModelParams(scfg, tensors)


def teacher_logits(teacher: ModelParams, dataset: LabeledDataset, batch_size: int = 256) -> np.ndarray:
    """Classification logits for every sample, indexed by sample id."""
    return predict_pass(teacher, dataset, batch_size).logits


def distill_run(teacher_cache: np.ndarray, student: ModelParams, train: LabeledDataset,
                dev: LabeledDataset | None, alpha: float, temperature: float,
                cfg: TrainConfig) -> tuple[ModelParams, RunReport]:
    """Train ``student`` in place on kd_loss against cached teacher logits."""
    if teacher_cache.shape != (len(train), student.config.num_classes):
        raise DistillConfigError(
            f"teacher logits {teacher_cache.shape} do not match {len(train)} samples x "
            f"{student.config.num_classes} classes")

    def batch_objective(batch: Batch, _centroids) -> Objective:
        out = forward(batch.ids, student, lengths=batch.lengths)
        total = kd_loss(out.logits, teacher_cache[batch.sample_ids], batch.labels, alpha,
                        temperature, reduction="mean")
        return Objective(total, total, None, None, tn.softmax(out.pooled))

    def epoch_objective(train_pass: PassResult, _rec) -> float:
        with tn.no_grad():
            return kd_loss(Tensor(train_pass.logits), teacher_cache, train.labels, alpha,
                           temperature, reduction="mean").item()

    params, report = run_loop(student, train, dev, cfg, batch_objective, epoch_objective,
                              label=f"student(alpha={alpha}, T={temperature})")
    report.config.update({"alpha": alpha, "temperature": temperature})
    return params, report


@dataclass
class DistillCell:
    alpha: float
    temperature: float
    runs: list[RunReport]
    median: RunReport | None
    student: ModelParams | None = field(default=None, repr=False)

    @property
    def metric(self) -> float:
        return self.median.metric if self.median else float("-inf")


@dataclass
class DistillResult:
    cells: list[DistillCell]
    best: DistillCell
    teacher_metric: float | None = None

    @property
    def best_student(self) -> ModelParams:
        return self.best.student

    def rows(self) -> list[dict]:
        rows = []
        for c in self.cells:
            for r in c.runs:
                rows.append({"alpha": c.alpha, "temperature": c.temperature, "seed": r.seed,
                             "metric": r.metric if r.status == "ok" else None,
                             "best_epoch": r.best_epoch, "row_type": "run"})
            if c.median is not None:
                rows.append({"alpha": c.alpha, "temperature": c.temperature,
                             "seed": c.median.seed, "metric": c.median.metric,
                             "best_epoch": c.median.best_epoch, "row_type": "median"})
        return rows

    def write_csv(self, path) -> None:
        cols = ["alpha", "temperature", "seed", "metric", "best_epoch", "row_type"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, cols, lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({k: "" if v is None else v for k, v in row.items()})

    def best_report(self) -> dict:
        return {"alpha": self.best.alpha, "temperature": self.best.temperature,
                "metric": self.best.metric, "teacher_metric": self.teacher_metric,
                "report": self.best.median.to_dict()}


def distill(teacher: ModelParams, train: LabeledDataset, dev: LabeledDataset | None,
            dcfg: DistillConfig, student: ModelParams | None = None, out_dir=None) -> DistillResult:
    """Grid over (alpha, T); each cell runs ``runs_per_config`` seeds and keeps the median.

    The teacher is only read. ``student`` overrides the default every-other-layer
    initialisation (it is copied, never modified).
    """
    init = student if student is not None else init_student(teacher)
    if init.config.vocab_size != teacher.config.vocab_size:
        raise DistillConfigError("teacher and student vocab sizes differ")
    if init.config.num_classes != teacher.config.num_classes:
        raise DistillConfigError("teacher and student class counts differ")
    cache = teacher_logits(teacher, train, dcfg.eval_batch_size)
    teacher_metric = evaluate(teacher, dev if dev is not None else train, dcfg.metric,
                              dcfg.eval_batch_size)["metric"]
    out = Path(out_dir) if out_dir is not None else None
    cells = []
    for alpha in dcfg.alphas:
        for temp in dcfg.temperatures:
            runs, students = [], {}
            for i in range(dcfg.runs_per_config):
                seed = dcfg.seed + i
                params, report = distill_run(cache, init.copy(), train, dev, alpha, temp,
                                             dcfg.train_config(seed))
                runs.append(report)
                students[id(report)] = params
                if out is not None:
                    run_dir = out / "runs" / f"alpha{alpha:g}_T{temp:g}_seed{seed}"
                    run_dir.mkdir(parents=True, exist_ok=True)
                    report.save(run_dir / "report.json")
                    write_epoch_csv(report, run_dir / "metrics.csv")
            med = median_run(runs)
            cells.append(DistillCell(alpha, temp, runs, med,
                                     students.get(id(med)) if med is not None else None))
    best = max(cells, key=lambda c: c.metric)
    result = DistillResult(cells, best, teacher_metric)
    if out is not None:
        result.write_csv(out / "distill_grid.csv")
        (out / "best_cell.json").write_text(json.dumps(result.best_report(), indent=2,
                                                       sort_keys=True) + "\n")
    return result


def compare_teachers(teachers: dict[str, ModelParams], train: LabeledDataset,
                     dev: LabeledDataset | None, dcfg: DistillConfig, out_dir=None) -> dict:
    """Distil each named teacher with the same grid and tabulate the best students.

    Returns ``{"results": {name: DistillResult}, "rows": [...]}``; rows carry
    the teacher metric, best cell and best student metric per teacher. The gap
    between teachers is reported, not asserted.
    """
    results, rows = {}, []
    for name, teacher in teachers.items():
        sub = Path(out_dir) / name if out_dir is not None else None
        res = distill(teacher, train, dev, dcfg, out_dir=sub)
        results[name] = res
        rows.append({"teacher": name, "teacher_metric": res.teacher_metric,
                     "best_alpha": res.best.alpha, "best_temperature": res.best.temperature,
                     "student_metric": res.best.metric})
    if out_dir is not None:
        with open(Path(out_dir) / "teacher_comparison.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return {"results": results, "rows": rows}
