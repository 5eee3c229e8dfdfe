"""Training loops for CMI-constrained fine-tuning.

:func:`alternating_fit` solves the double minimisation over model parameters
and per-label centroid distributions by coordinate descent: a closed-form
centroid step (``G_y <- g_y``) followed by gradient steps on the parameters
with the centroids frozen. :func:`max_cmi_fit` runs the same loop with the CMI
term subtracted. :func:`sweep` repeats runs over a lambda grid and
:func:`select_teacher` picks the run with the best metric-to-CMI ratio.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .cmi import (MODES, CentroidSet, DegenerateClusterError, centroid_optimality_check,
                  compute_centroids, dataset_cmi_value)
from .data import Batch, LabeledDataset, all_metrics, collate, compute_metric, iter_batches
from .losses import CMI_SIGNS, Objective, lm_loss, objective_terms
from .model import ModelParams, forward, save_checkpoint

log = logging.getLogger(__name__)

REFRESH_POLICIES = ("per_epoch", "per_step_ema")
OPTIMIZERS = ("adam", "sgd")


class TrainError(RuntimeError):
    pass


class TrainConfigError(ValueError):
    pass


class DivergenceError(TrainError):
    """Raised when a step produces non-finite values; carries the last good state."""

    def __init__(self, message: str, epoch: int, step: int, last_good: dict | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.0
    gamma: float = 0.0
    cmi_sign: str = "off"
    cmi_mode: str = "eq11_average"
    epochs: int = 5
    batch_size: int = 32
    lr: float = 3e-4
    seed: int = 0
    centroid_refresh: str = "per_epoch"
    ema_beta: float = 0.9
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    backtracking: bool = False
    metric: str = "accuracy"
    kl_clip: float = 50.0
    trainable: tuple[str, ...] | None = None
    centroid_checks: int = 10
    eval_batch_size: int = 256
    record_trace: bool = False

    def __post_init__(self):
        if self.trainable is not None and not isinstance(self.trainable, tuple):
            object.__setattr__(self, "trainable", tuple(self.trainable))
        if self.cmi_sign not in CMI_SIGNS:
            raise TrainConfigError(f"cmi_sign must be one of {CMI_SIGNS}, got {self.cmi_sign!r}")
        if self.cmi_mode not in MODES:
            raise TrainConfigError(f"cmi_mode must be one of {MODES}, got {self.cmi_mode!r}")
        if not math.isfinite(self.lam) or self.lam < 0:
            raise TrainConfigError(f"lambda must be a finite value >= 0, got {self.lam}")
        if self.cmi_sign != "off" and self.lam <= 0:
            raise TrainConfigError("lambda must be > 0 when the CMI term is active")
        if self.gamma < 0:
            raise TrainConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise TrainConfigError("epochs and batch sizes must be >= 1")
        if not self.lr > 0:
            raise TrainConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.centroid_refresh not in REFRESH_POLICIES:
            raise TrainConfigError(f"centroid_refresh must be one of {REFRESH_POLICIES}")
        if not 0.0 <= self.ema_beta < 1.0:
            raise TrainConfigError("ema_beta must be in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise TrainConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.kl_clip <= 0:
            raise TrainConfigError("kl_clip must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.trainable is not None:
            d["trainable"] = list(self.trainable)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


# -- optimisers -----------------------------------------------------------------

class SGD:
    def __init__(self, params: list[tn.Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is not None:
                p.data -= lr * p.grad


class Adam:
    def __init__(self, params: list[tn.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- reports ------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    objective: float
    cls_loss: float
    lm_loss: float | None
    cmi: float | None
    train_cmi: float
    dev_cmi: float | None
    metric: float
    metrics: dict
    clipped: int = 0
    centroid_check: bool | None = None


@dataclass
class RunReport:
    config: dict
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    final_centroids: dict | None = None
    data: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None
    trace: list | None = None
    wall_clock: float = 0.0
    label: str = ""
    echo: dict | None = None

    @property
    def best(self) -> EpochRecord | None:
        if self.best_epoch is None:
            return None
        return self.epochs[self.best_epoch - 1]

    @property
    def metric(self) -> float:
        return self.best.metric if self.best else float("nan")

    @property
    def cmi(self) -> float:
        return self.best.train_cmi if self.best else float("nan")

    @property
    def lam(self) -> float:
        return self.config.get("lam", 0.0)

    @property
    def clip_events(self) -> int:
        return sum(e.clipped for e in self.epochs)

    def to_dict(self) -> dict:
        """Deterministic content; wall-clock time is deliberately left out."""
        d = asdict(self)
        d.pop("wall_clock")
        for key in ("trace", "echo"):
            if d[key] is None:
                d.pop(key)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        d["epochs"] = [EpochRecord(**e) for e in d.get("epochs", [])]
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def write_epoch_csv(report: RunReport, path) -> None:
    cols = ["epoch", "objective", "cls_loss", "lm_loss", "cmi", "train_cmi", "dev_cmi",
            "metric", "clipped", "centroid_check"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for e in report.epochs:
            w.writerow(["" if getattr(e, c) is None else getattr(e, c) for c in cols])


# -- evaluation -----------------------------------------------------------------

@dataclass
class PassResult:
    logits: np.ndarray
    features: np.ndarray
    lm_total: float | None


def predict_pass(params: ModelParams, dataset: LabeledDataset, batch_size: int = 256,
                 with_lm: bool = False) -> PassResult:
    """Logits and feature distributions for every sample, in dataset order."""
    logits, feats, lm_total = [], [], 0.0
    with tn.no_grad():
        for batch in iter_batches(dataset, batch_size):
            out = forward(batch.ids, params, lengths=batch.lengths)
            logits.append(out.logits.data)
            feats.append(tn.softmax(out.pooled).data)
            if with_lm:
                lm_total += lm_loss(batch, params, "sum", hidden=out.hidden).item()
    return PassResult(np.concatenate(logits), np.concatenate(feats), lm_total if with_lm else None)


def _cmi_or_none(features, labels, num_classes, mode) -> tuple[float | None, CentroidSet | None]:
    try:
        cents = compute_centroids(features, labels, num_classes)
    except DegenerateClusterError:
        return None, None
    return dataset_cmi_value(features, labels, cents, mode), cents


def evaluate(params: ModelParams, dataset: LabeledDataset, metric: str = "accuracy",
             batch_size: int = 256) -> dict:
    """All applicable metrics plus the selected one under ``"metric"``."""
    res = predict_pass(params, dataset, batch_size)
    preds = res.logits.argmax(axis=1)
    out = all_metrics(preds, dataset.labels, dataset.num_classes)
    out["metric"] = compute_metric(metric, preds, dataset.labels)
    out["metric_name"] = metric
    cmi, _ = _cmi_or_none(res.features, dataset.labels, dataset.num_classes, "eq11_average")
    out["cmi"] = cmi
    return out


# -- the loop -----------------------------------------------------------------

BatchObjective = Callable[[Batch, "CentroidSet | None"], Objective]
EpochObjective = Callable[[PassResult, EpochRecord], float]


def _nll_mean(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.maximum(logp[np.arange(len(labels)), labels], np.log(tn.LOG_EPS)).mean())


def _batch_centroids(features: np.ndarray, labels: np.ndarray, num_classes: int):
    present = np.unique(labels)
    return present, np.stack([features[labels == y].mean(axis=0) for y in present])


def run_loop(params: ModelParams, train: LabeledDataset, dev: LabeledDataset | None,
             cfg: TrainConfig, batch_objective: BatchObjective,
             epoch_objective: EpochObjective | None = None, use_centroids: bool = False,
             label: str = "") -> tuple[ModelParams, RunReport]:
    """Shared epoch/step loop; returns the best-epoch parameters and the report."""
    t0 = time.perf_counter()
    for y, n in enumerate(train.counts):
        if n == 0:
            raise DegenerateClusterError(f"training split has no samples of label {y}")
    trainable = params.parameters(cfg.trainable)
    if cfg.optimizer == "adam":
        opt = Adam(trainable, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    else:
        opt = SGD(trainable, cfg.lr)
    check_rng = np.random.default_rng([cfg.seed, 7919])
    eval_set = dev if dev is not None else train
    report = RunReport(config=cfg.to_dict(), seed=cfg.seed, label=label,
                       data={"train": train.fingerprint(),
                             "dev": eval_set.fingerprint() if dev is not None else None},
                       trace=[] if cfg.record_trace else None)

    train_pass = predict_pass(params, train, cfg.eval_batch_size) if use_centroids else None
    centroids = None
    best_state, best_metric = None, -np.inf
    last_good = params.state()

    for epoch in range(1, cfg.epochs + 1):
        check = None
        if use_centroids and (cfg.centroid_refresh == "per_epoch" or centroids is None):
            centroids = compute_centroids(train_pass.features, train.labels, train.num_classes)
            if cfg.centroid_checks:
                check = centroid_optimality_check(train_pass.features, train.labels, centroids,
                                                  cfg.centroid_checks, check_rng)
            if report.trace is not None:
                report.trace.append(["centroid", _full_objective(params, train, cfg, batch_objective,
                                                                 centroids)])
        clipped = 0
        for step, batch in enumerate(iter_batches(train, cfg.batch_size, cfg.seed, epoch)):
            try:
                obj = _step(params, opt, cfg, batch, batch_objective, centroids)
            except tn.NumericError as exc:
                raise DivergenceError(f"numeric divergence at epoch {epoch}, step {step}: {exc}",
                                      epoch, step, last_good) from exc
            clipped += obj.clipped
            if use_centroids and cfg.centroid_refresh == "per_step_ema":
                present, means = _batch_centroids(obj.features.data, batch.labels, train.num_classes)
                centroids.probs[present] = (cfg.ema_beta * centroids.probs[present]
                                            + (1.0 - cfg.ema_beta) * means)
            if report.trace is not None:
                report.trace.append(["params", _full_objective(params, train, cfg, batch_objective,
                                                               centroids)])

        with_lm = cfg.gamma > 0
        train_pass = predict_pass(params, train, cfg.eval_batch_size, with_lm=with_lm)
        dev_pass = predict_pass(params, eval_set, cfg.eval_batch_size) if dev is not None else train_pass
        if not (np.all(np.isfinite(train_pass.logits)) and np.all(np.isfinite(dev_pass.logits))):
            raise DivergenceError(f"non-finite outputs after epoch {epoch}", epoch, -1, last_good)
        preds = dev_pass.logits.argmax(axis=1)
        train_cmi, cents = _cmi_or_none(train_pass.features, train.labels, train.num_classes,
                                        cfg.cmi_mode)
        dev_cmi, _ = _cmi_or_none(dev_pass.features, eval_set.labels, eval_set.num_classes,
                                  cfg.cmi_mode)
        rec = EpochRecord(
            epoch=epoch, objective=0.0,
            cls_loss=_nll_mean(train_pass.logits, train.labels),
            lm_loss=train_pass.lm_total / len(train) if with_lm else None,
            cmi=None, train_cmi=train_cmi, dev_cmi=dev_cmi,
            metric=compute_metric(cfg.metric, preds, eval_set.labels),
            metrics=all_metrics(preds, eval_set.labels, eval_set.num_classes),
            clipped=clipped, centroid_check=check,
        )
        rec.objective = (epoch_objective or _cmi_epoch_objective(cfg, len(train)))(train_pass, rec)
        report.epochs.append(rec)
        report.final_centroids = cents.to_dict() if cents is not None else None
        log.info("%s epoch %d: objective %.6f metric %.4f train_cmi %.6f", label or "run", epoch,
                 rec.objective, rec.metric, train_cmi)
        if rec.metric > best_metric:
            best_metric, best_state = rec.metric, params.state()
            report.best_epoch = epoch
        last_good = params.state()

    params.load_state(best_state)
    report.wall_clock = time.perf_counter() - t0
    return params, report


def _cmi_epoch_objective(cfg: TrainConfig, n_train: int) -> EpochObjective:
    def objective(_pass: PassResult, rec: EpochRecord) -> float:
        total = rec.cls_loss + (cfg.gamma * rec.lm_loss if rec.lm_loss is not None else 0.0)
        if cfg.cmi_sign != "off":
            rec.cmi = rec.train_cmi / n_train if cfg.cmi_mode == "eq12_literal" else rec.train_cmi
            total += rec.cmi * (cfg.lam if cfg.cmi_sign == "min" else -cfg.lam)
        return total
    return objective


def _step(params, opt, cfg: TrainConfig, batch, batch_objective, centroids) -> Objective:
    params.zero_grad()
    obj = batch_objective(batch, centroids)
    tn.backward(obj.total)
    if cfg.optimizer == "sgd" and cfg.backtracking:
        _backtrack(params, opt, batch, batch_objective, centroids, obj.total.item())
    else:
        opt.step()
    return obj


def _backtrack(params, opt: SGD, batch, batch_objective, centroids, current: float,
               max_halvings: int = 40) -> None:
    start = [p.data.copy() for p in opt.params]
    lr = opt.lr
    for _ in range(max_halvings):
        opt.step(lr)
        with tn.no_grad():
            trial = batch_objective(batch, centroids).total.item()
        if trial <= current:
            return
        for p, s in zip(opt.params, start):
            p.data[...] = s
        lr *= 0.5


def _full_objective(params, train, cfg, batch_objective, centroids) -> float:
    with tn.no_grad():
        return batch_objective(collate(train, np.arange(len(train))), centroids).total.item()


# -- public fits ----------------------------------------------------------------

def cmi_batch_objective(params: ModelParams, cfg: TrainConfig) -> BatchObjective:
    clip = cfg.kl_clip if cfg.cmi_sign == "max" else None

    def objective(batch: Batch, centroids: CentroidSet | None) -> Objective:
        return objective_terms(batch, params, gamma=cfg.gamma, lam=cfg.lam, sign=cfg.cmi_sign,
                               centroids=centroids, mode=cfg.cmi_mode, reduction="mean", clip=clip)
    return objective


def fit(params: ModelParams, train: LabeledDataset, dev: LabeledDataset | None,
        cfg: TrainConfig, label: str = "") -> tuple[ModelParams, RunReport]:
    """Dispatch on ``cfg.cmi_sign``: min, max or plain fine-tuning."""
    return run_loop(params, train, dev, cfg, cmi_batch_objective(params, cfg),
                    use_centroids=cfg.cmi_sign != "off", label=label)


def alternating_fit(params: ModelParams, train: LabeledDataset, dev: LabeledDataset | None,
                    cfg: TrainConfig) -> tuple[ModelParams, RunReport]:
    """Minimise L_Final + lam * CMI by alternating centroid and parameter steps."""
    if cfg.cmi_sign == "max":
        raise TrainConfigError("alternating_fit minimises CMI; use max_cmi_fit for cmi_sign='max'")
    return fit(params, train, dev, cfg, label="min-cmi" if cfg.cmi_sign == "min" else "baseline")


def max_cmi_fit(params: ModelParams, train: LabeledDataset, dev: LabeledDataset | None,
                cfg: TrainConfig) -> tuple[ModelParams, RunReport]:
    """Minimise L_Final - lam * CMI; centroids still track the current clusters."""
    if cfg.cmi_sign == "min":
        raise TrainConfigError("max_cmi_fit needs cmi_sign='max' (or 'off')")
    return fit(params, train, dev, cfg, label="max-cmi" if cfg.cmi_sign == "max" else "baseline")


def pretrain_lm(params: ModelParams, corpus: LabeledDataset, epochs: int = 1, lr: float = 1e-3,
                batch_size: int = 32, seed: int = 0) -> list[float]:
    """Causal LM pretraining on the token sequences; returns mean loss per epoch."""
    opt = Adam([t for n, t in params.tensors.items() if n != "W"], lr)
    history = []
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for batch in iter_batches(corpus, batch_size, seed, epoch):
            params.zero_grad()
            loss = lm_loss(batch, params, "mean")
            tn.backward(loss)
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        history.append(total / count)
    return history


# -- sweeps -------------------------------------------------------------------

def _cell_fingerprint(cfg: TrainConfig, factory_key: str, train: LabeledDataset,
                      dev: LabeledDataset | None) -> str:
    payload = json.dumps({"train": cfg.to_dict(), "model": factory_key,
                          "data": [train.fingerprint(), dev.fingerprint() if dev else None]},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _run_cell(args) -> tuple[RunReport, str | None]:
    model_factory, train, dev, cfg, cell_dir = args
    try:
        params = model_factory(cfg.seed)
        params, report = fit(params, train, dev, cfg)
    except (TrainError, tn.TensorError, DegenerateClusterError, ValueError) as exc:
        report = RunReport(config=cfg.to_dict(), seed=cfg.seed, status="failed", error=str(exc))
        params = None
    ckpt = None
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
        if params is not None:
            ckpt = str(cell_dir / "checkpoint.ckpt")
            save_checkpoint(ckpt, params, {"report": "report.json", "lam": cfg.lam, "seed": cfg.seed})
        report.save(cell_dir / "report.json")
        write_epoch_csv(report, cell_dir / "metrics.csv")
    return report, ckpt


def median_run(reports: list[RunReport]) -> RunReport | None:
    """Middle run by metric (lower middle for even counts); failed runs skipped."""
    ok = sorted((r for r in reports if r.status == "ok"), key=lambda r: (r.metric, r.seed))
    return ok[(len(ok) - 1) // 2] if ok else None


@dataclass
class SweepCell:
    lam: float
    seed: int
    report: RunReport
    checkpoint: str | None = None
    fingerprint: str = ""


@dataclass
class SweepResult:
    cells: list[SweepCell]
    medians: dict[float, SweepCell]

    def rows(self) -> list[dict]:
        rows = []
        for kind, cells in (("run", self.cells), ("median", list(self.medians.values()))):
            for c in cells:
                r = c.report
                ok = r.status == "ok"
                metric = r.metric if ok else None
                cmi = r.cmi if ok else None
                ratio = metric / cmi if ok and cmi else None
                rows.append({"lambda": c.lam, "seed": c.seed, "metric": metric, "cmi": cmi,
                             "best_epoch": r.best_epoch,
                             "objective": r.best.objective if ok else None,
                             "metric_cmi_ratio": ratio, "row_type": kind, "status": r.status,
                             "checkpoint": c.checkpoint or ""})
        return rows

    def write_csv(self, path) -> None:
        cols = ["lambda", "seed", "metric", "cmi", "best_epoch", "objective", "metric_cmi_ratio",
                "row_type", "status", "checkpoint"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, cols, lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({k: "" if v is None else v for k, v in row.items()})


def sweep(model_factory: Callable[[int], ModelParams], train: LabeledDataset,
          dev: LabeledDataset | None, lambdas, base: TrainConfig, runs_per_config: int = 3,
          seeds=None, jobs: int = 1, out_dir=None, factory_key: str = "") -> SweepResult:
    """Run every (lambda, seed) cell and keep the median run per lambda.

    Seeds default to ``base.seed + run_index``. With ``out_dir`` each cell is
    persisted under a fingerprint of its full config; cells already on disk
    are loaded instead of re-run.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise TrainConfigError("empty lambda grid")
    seeds = list(seeds) if seeds is not None else [base.seed + i for i in range(runs_per_config)]
    out = Path(out_dir) if out_dir is not None else None
    plan, cells = [], []
    for lam in lambdas:
        for seed in seeds:
            cfg = replace(base, lam=float(lam), seed=int(seed))
            fp = _cell_fingerprint(cfg, factory_key, train, dev)
            cell_dir = out / "cells" / fp if out is not None else None
            cell = SweepCell(float(lam), int(seed), None, None, fp)
            cells.append(cell)
            if cell_dir is not None and (cell_dir / "report.json").exists():
                cell.report = RunReport.load(cell_dir / "report.json")
                ckpt = cell_dir / "checkpoint.ckpt"
                cell.checkpoint = str(ckpt) if ckpt.exists() else None
                log.info("sweep: reusing finished cell lam=%s seed=%s", lam, seed)
            else:
                plan.append((cell, (model_factory, train, dev, cfg, cell_dir)))
    if jobs > 1 and len(plan) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, [args for _, args in plan]))
    else:
        results = [_run_cell(args) for _, args in plan]
    for (cell, _), (report, ckpt) in zip(plan, results):
        cell.report, cell.checkpoint = report, ckpt
    medians = {}
    for lam in lambdas:
        group = [c for c in cells if c.lam == float(lam)]
        med = median_run([c.report for c in group])
        if med is not None:
            medians[float(lam)] = next(c for c in group if c.report is med)
    result = SweepResult(cells, medians)
    if out is not None:
        result.write_csv(out / "sweep_summary.csv")
    return result


# -- teacher selection ------------------------------------------------------------

@dataclass
class TeacherCandidate:
    lam: float
    metric: float
    cmi: float
    checkpoint: str | None = None
    seed: int | None = None

    @property
    def ratio(self) -> float | None:
        return self.metric / self.cmi if self.cmi else None


def select_teacher(candidates) -> TeacherCandidate:
    """Candidate with the highest metric/CMI ratio; ties go to the smaller lambda.

    A candidate with zero CMI has no ratio: it is ranked last with a warning.
    """
    cands = [c if isinstance(c, TeacherCandidate) else TeacherCandidate(**c) for c in candidates]
    if not cands:
        raise TrainConfigError("no teacher candidates")
    for c in cands:
        if not c.cmi:
            warnings.warn(f"teacher candidate lambda={c.lam} has zero CMI; ranking it last",
                          RuntimeWarning, stacklevel=2)

    def key(c):
        return (c.ratio is not None, c.ratio if c.ratio is not None else 0.0, -c.lam)

    return max(cands, key=key)


def candidates_from_summary(path) -> list[TeacherCandidate]:
    """Median rows of a sweep summary CSV as teacher candidates."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["row_type"] != "median" or row["status"] != "ok":
                continue
            out.append(TeacherCandidate(float(row["lambda"]), float(row["metric"]),
                                        float(row["cmi"]), row["checkpoint"] or None,
                                        int(row["seed"])))
    return out
