"""``cmi-tune`` command line: train, sweep, distill, eval and report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence. Output goes to ``--out``, else ``output.dir`` from the config,
else ``$CMI_TUNE_OUT/<command>``, else ``./cmi_tune_runs/<command>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from functools import partial
from pathlib import Path

from .data import (SYNTH_KINDS, DataError, LabeledDataset, TaskConfigError, load_jsonl, read_jsonl,
                   synth_task, synth_vocab)
from .distiller import DistillConfig, DistillConfigError, compare_teachers, distill
from .losses import LossError
from .model import ModelConfig, ModelError, ModelParams, init_params, load_checkpoint, save_checkpoint
from .report import ReportError, build_report
from .tokenizer import TokenizerError, Vocab, load_vocab, save_vocab, train_bpe
from .trainer import (DivergenceError, RunReport, TrainConfig, TrainConfigError, alternating_fit,
                      candidates_from_summary, evaluate, max_cmi_fit, select_teacher, sweep,
                      write_epoch_csv)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
COMMANDS = ("train", "sweep", "distill", "eval", "report")
ENV_OUT = "CMI_TUNE_OUT"

log = logging.getLogger("cmi_tune")


class ConfigError(ValueError):
    pass


class CliDataError(RuntimeError):
    pass


@dataclass(frozen=True)
class DataConfig:
    task: str | None = "majority_token"
    n_train: int = 2000
    n_dev: int = 500
    length: int = 16
    num_classes: int = 2
    train_path: str | None = None
    dev_path: str | None = None
    vocab_path: str | None = None


@dataclass(frozen=True)
class SweepConfig:
    lambdas: tuple[float, ...] = (0.1, 0.5, 1.0)
    runs_per_config: int = 3


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: str | None = None
    run_dir: str | None = None


@dataclass(frozen=True)
class OutputConfig:
    dir: str | None = None


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def echo(self) -> dict:
        return {"model": dict(self.model), "train": self.train.to_dict(),
                "distill": self.distill.to_dict(),
                "data": asdict(self.data), "sweep": {**asdict(self.sweep),
                                                     "lambdas": list(self.sweep.lambdas)},
                "eval": asdict(self.eval), "output": asdict(self.output)}


def _strict(cls, section: str, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return cls(**d)


def parse_config(doc: dict, seed: int | None = None) -> RunConfig:
    """Validate a config document; every error surfaces as ConfigError."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    sections = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - sections
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        model = doc.get("model", {})
        _strict(ModelConfig, "model", model)
        train = dict(doc.get("train", {}))
        dist = dict(doc.get("distill", {}))
        if seed is not None:
            train["seed"] = seed
            dist["seed"] = seed
        sweep_sec = dict(doc.get("sweep", {}))
        if "lambdas" in sweep_sec:
            sweep_sec["lambdas"] = tuple(float(x) for x in sweep_sec["lambdas"])
        cfg = RunConfig(model=dict(model),
                        train=TrainConfig.from_dict(train),
                        distill=DistillConfig.from_dict(dist),
                        data=_strict(DataConfig, "data", doc.get("data", {})),
                        sweep=_strict(SweepConfig, "sweep", sweep_sec),
                        eval=_strict(EvalConfig, "eval", doc.get("eval", {})),
                        output=_strict(OutputConfig, "output", doc.get("output", {})))
    except (TrainConfigError, DistillConfigError, ModelError, LossError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    d = cfg.data
    if d.task is None and d.train_path is None:
        raise ConfigError("data needs either task or train_path")
    if d.task is not None and d.task not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic task {d.task!r}; choose from {SYNTH_KINDS}")
    if d.task is not None and d.train_path is None:
        ctx = model.get("context_len", ModelConfig.context_len)
        if d.length + 2 > ctx:
            raise ConfigError(f"synthetic length {d.length} plus 2 specials exceeds context {ctx}")
    if not cfg.sweep.lambdas or cfg.sweep.runs_per_config < 1:
        raise ConfigError("sweep needs a nonempty lambda grid and runs_per_config >= 1")
    return cfg


def load_config(path: str | None, seed: int | None = None) -> RunConfig:
    if path is None:
        return parse_config({}, seed)
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc, seed)


def output_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.output.dir:
        return Path(cfg.output.dir)
    root = os.environ.get(ENV_OUT)
    return Path(root or "cmi_tune_runs") / args.command


# -- data ---------------------------------------------------------------------

def load_data(cfg: RunConfig, out: Path | None) -> tuple[Vocab, LabeledDataset, LabeledDataset | None]:
    """Vocab plus train/dev splits; a freshly trained BPE vocab is saved to ``out``."""
    d = cfg.data
    ctx = cfg.model.get("context_len", ModelConfig.context_len)
    try:
        if d.train_path is None:
            vocab = load_vocab(d.vocab_path) if d.vocab_path else synth_vocab()
            seed = cfg.train.seed
            train = synth_task(d.task, d.n_train, seed, vocab, d.length, "train", d.num_classes)
            dev = (synth_task(d.task, d.n_dev, seed + 1, vocab, d.length, "dev", d.num_classes)
                   if d.n_dev else None)
            return vocab, train, dev
        if d.vocab_path:
            vocab = load_vocab(d.vocab_path)
        else:
            texts, _ = read_jsonl(d.train_path)
            vocab = train_bpe(b"\n".join(texts), cfg.model.get("vocab_size", ModelConfig.vocab_size))
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                save_vocab(vocab, out / "vocab.txt")
        train = load_jsonl(d.train_path, vocab, ctx, split="train")
        dev = (load_jsonl(d.dev_path, vocab, ctx, train.num_classes, "dev")
               if d.dev_path else None)
        return vocab, train, dev
    except TaskConfigError as exc:
        raise ConfigError(str(exc)) from None
    except (OSError, TokenizerError, DataError) as exc:
        raise CliDataError(str(exc)) from None


def model_config(cfg: RunConfig, vocab: Vocab, train: LabeledDataset) -> ModelConfig:
    given = dict(cfg.model)
    given.setdefault("vocab_size", len(vocab))
    given.setdefault("num_classes", train.num_classes)
    mcfg = ModelConfig(**given)
    if mcfg.vocab_size < len(vocab):
        raise ConfigError(f"model vocab_size {mcfg.vocab_size} < tokenizer vocab {len(vocab)}")
    if mcfg.num_classes != train.num_classes:
        raise ConfigError(f"model has {mcfg.num_classes} classes, data has {train.num_classes}")
    return mcfg


def check_compatible(params: ModelParams, vocab: Vocab, data: LabeledDataset, what: str) -> None:
    c = params.config
    if c.vocab_size < len(vocab) or c.num_classes != data.num_classes:
        raise ConfigError(f"{what} (vocab {c.vocab_size}, {c.num_classes} classes) does not fit "
                          f"the data (vocab {len(vocab)}, {data.num_classes} classes)")
    longest = max(data.max_len(), 0)
    if longest > c.context_len:
        raise ConfigError(f"{what} context {c.context_len} shorter than data sequences ({longest})")


def _load_teacher(path: str | None, what: str) -> ModelParams:
    if not path:
        raise ConfigError(f"no {what} configured")
    try:
        params, _ = load_checkpoint(path)
    except FileNotFoundError:
        raise CliDataError(f"{what} {path} not found") from None
    return params


# -- commands -----------------------------------------------------------------

def _write_run(out: Path, params: ModelParams, report: RunReport, echo: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report.echo = echo
    save_checkpoint(out / "checkpoint.ckpt", params, {"best_epoch": report.best_epoch,
                                                      "seed": report.seed})
    report.save(out / "report.json")
    write_epoch_csv(report, out / "metrics.csv")
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")


def cmd_train(args, cfg: RunConfig) -> int:
    out = output_dir(args, cfg)
    vocab, train, dev = load_data(cfg, out)
    mcfg = model_config(cfg, vocab, train)
    params = init_params(mcfg, cfg.train.seed)
    fit_fn = max_cmi_fit if cfg.train.cmi_sign == "max" else alternating_fit
    try:
        params, report = fit_fn(params, train, dev, cfg.train)
    except DivergenceError as exc:
        out.mkdir(parents=True, exist_ok=True)
        if exc.last_good is not None:
            params.load_state(exc.last_good)
            save_checkpoint(out / "last_good.ckpt", params, {"epoch": exc.epoch, "step": exc.step})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _write_run(out, params, report, cfg.echo())
    best = report.best
    print(f"best epoch {report.best_epoch}: {cfg.train.metric} {best.metric:.4f}, "
          f"train CMI {best.train_cmi:.6f}, clipped {report.clip_events}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    out = output_dir(args, cfg)
    vocab, train, dev = load_data(cfg, out)
    mcfg = model_config(cfg, vocab, train)
    for lam in cfg.sweep.lambdas:
        try:
            replace(cfg.train, lam=lam)
        except TrainConfigError as exc:
            raise ConfigError(f"lambda {lam}: {exc}") from None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.echo(), indent=2, sort_keys=True) + "\n")
    result = sweep(partial(init_params, mcfg), train, dev, cfg.sweep.lambdas, cfg.train,
                   cfg.sweep.runs_per_config, jobs=args.jobs, out_dir=out,
                   factory_key=json.dumps(mcfg.to_dict(), sort_keys=True))
    failed = [c for c in result.cells if c.report.status != "ok"]
    for c in failed:
        print(f"warning: lambda={c.lam} seed={c.seed} failed: {c.report.error}", file=sys.stderr)
    for lam, cell in result.medians.items():
        r = cell.report
        print(f"lambda={lam:g}: median seed {cell.seed}, metric {r.metric:.4f}, CMI {r.cmi:.6f}")
    print(f"wrote {out / 'sweep_summary.csv'}")
    if not result.medians:
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_distill(args, cfg: RunConfig) -> int:
    out = output_dir(args, cfg)
    dcfg = cfg.distill
    chosen = None
    if dcfg.sweep_summary:
        try:
            cands = candidates_from_summary(dcfg.sweep_summary)
        except (OSError, KeyError, ValueError) as exc:
            raise CliDataError(f"sweep summary {dcfg.sweep_summary}: {exc}") from None
        if not cands:
            raise CliDataError(f"sweep summary {dcfg.sweep_summary} has no usable median rows")
        chosen = select_teacher(cands)
        print(f"selected teacher lambda={chosen.lam:g} (metric {chosen.metric:.4f}, "
              f"CMI {chosen.cmi:.6f}, ratio {chosen.ratio:.4f})")
        teacher = _load_teacher(chosen.checkpoint, "teacher checkpoint")
    else:
        teacher = _load_teacher(dcfg.teacher_checkpoint, "teacher checkpoint")
    baseline = (_load_teacher(dcfg.baseline_teacher_checkpoint, "baseline teacher checkpoint")
                if dcfg.baseline_teacher_checkpoint else None)
    vocab, train, dev = load_data(cfg, out)
    check_compatible(teacher, vocab, train, "teacher")
    if baseline is not None:
        check_compatible(baseline, vocab, train, "baseline teacher")
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.echo()
    if chosen is not None:
        echo["selected_teacher"] = asdict(chosen)
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")

    if baseline is None:
        result = distill(teacher, train, dev, dcfg, out_dir=out)
        save_checkpoint(out / "student.ckpt", result.best_student,
                        {"alpha": result.best.alpha, "temperature": result.best.temperature})
        print(f"best cell alpha={result.best.alpha:g} T={result.best.temperature:g}: "
              f"student {result.best.metric:.4f} vs teacher {result.teacher_metric:.4f}")
    else:
        cmp = compare_teachers({"cmi": teacher, "baseline": baseline}, train, dev, dcfg, out_dir=out)
        for name, res in cmp["results"].items():
            save_checkpoint(out / name / "student.ckpt", res.best_student,
                            {"alpha": res.best.alpha, "temperature": res.best.temperature})
        for row in cmp["rows"]:
            print(f"{row['teacher']}: teacher {row['teacher_metric']:.4f}, best student "
                  f"{row['student_metric']:.4f} at alpha={row['best_alpha']:g} "
                  f"T={row['best_temperature']:g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = output_dir(args, cfg)
    path = args.checkpoint or cfg.eval.checkpoint
    if not path:
        raise ConfigError("eval needs --checkpoint or eval.checkpoint")
    try:
        params, _ = load_checkpoint(path)
    except FileNotFoundError:
        raise CliDataError(f"checkpoint {path} not found") from None
    vocab, train, dev = load_data(cfg, None)
    data = dev if dev is not None else train
    check_compatible(params, vocab, data, "checkpoint")
    res = evaluate(params, data, cfg.train.metric, cfg.train.eval_batch_size)
    res = {"checkpoint": str(path), "split": data.split, "n": len(data), **res}
    text = json.dumps(res, indent=2, sort_keys=True) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    out = output_dir(args, cfg)
    run_dir = args.run_dir or cfg.eval.run_dir
    if not run_dir:
        raise ConfigError("report needs --run-dir or eval.run_dir")
    if not Path(run_dir).is_dir():
        raise CliDataError(f"run directory {run_dir} not found")
    try:
        written = build_report(run_dir, out)
    except ReportError as exc:
        raise CliDataError(str(exc)) from None
    for key in sorted(written):
        print(f"{key}: {written[key]}")
    return EXIT_OK


HANDLERS = {"train": cmd_train, "sweep": cmd_sweep, "distill": cmd_distill, "eval": cmd_eval,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmi-tune",
                                description="CMI-regularised fine-tuning of a small causal transformer.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", help=f"output directory (default: output.dir, then ${ENV_OUT}/<command>)")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers (default 1)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--checkpoint", help="checkpoint to evaluate (eval)")
    p.add_argument("--run-dir", help="directory of run artifacts (report)")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed)
        return HANDLERS[args.command](args, cfg)
    except (ConfigError, TrainConfigError, DistillConfigError, ModelError, LossError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CliDataError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
