"""``glidn`` command line: data generation, training, distillation and reports.

Configuration comes from one JSON file of flat dotted keys (``gen.*``,
``train.*``, ``distill.*``, ``paths.*``, ``split.*`` and ``seed``); command
line flags override it. Each command writes ``manifest.json`` next to its
outputs.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence


from . import __version__
from .distill import DistillConfig
from .experiments import (
    OTHER,
    default_loss_kind,
    format_table,
    rows_to_csv,
    run_ablation,
    run_sweep,
    split,
    student_gradcheck,
)
from .metrics import EvalReport, evaluate
from .synthdata import GenConfig, generate, read_jsonl, write_jsonl
from .train import (
    ModelState,
    TrainConfig,
    load_checkpoint,
    loocv,
    prepare,
    save_checkpoint,
    train_dml,
    train_student,
    train_teacher,
)

logger = logging.getLogger("glidn")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2
PATH_KEYS = ("data_in", "model_in", "model_out", "report_out")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    paths: Dict[str, Optional[str]] = field(default_factory=lambda: {k: None for k in PATH_KEYS})
    split: Dict[str, float] = field(default_factory=lambda: {"val_fraction": 0.0, "test_fraction": 0.25})
    seed: int = 0

    def flat(self) -> Dict:
        out = {}
        for section in ("gen", "train", "distill"):
            for k, v in getattr(self, section).to_dict().items():
                out[f"{section}.{k}"] = v
        out.update({f"paths.{k}": v for k, v in self.paths.items()})
        out.update({f"split.{k}": v for k, v in self.split.items()})
        out["seed"] = self.seed
        return out

    @classmethod
    def from_flat(cls, flat: Dict) -> "RunConfig":
        sections: Dict[str, Dict] = {"gen": {}, "train": {}, "distill": {}, "paths": {}, "split": {}}
        seed = 0
        for key, value in flat.items():
            if key == "seed":
                seed = int(value)
                continue
            head, _, name = key.partition(".")
            if head not in sections or not name:
                raise ConfigError(f"unknown config key {key!r}")
            sections[head][name] = value
        unknown_paths = set(sections["paths"]) - set(PATH_KEYS)
        unknown_split = set(sections["split"]) - {"val_fraction", "test_fraction"}
        if unknown_paths or unknown_split:
            raise ConfigError(f"unknown config keys: {sorted(unknown_paths | unknown_split)}")
        try:
            gen = GenConfig.from_dict(sections["gen"])
            train = TrainConfig.from_dict({**sections["train"], "seed": seed})
            distill = DistillConfig.from_dict(sections["distill"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        paths = {k: None for k in PATH_KEYS}
        paths.update(sections["paths"])
        sp = {"val_fraction": 0.0, "test_fraction": 0.25}
        sp.update({k: float(v) for k, v in sections["split"].items()})
        return cls(gen, train, distill, paths, sp, seed)


def _parse_floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glidn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"glidn {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, help="JSON file of flat dotted keys")
        p.add_argument("--seed", type=int, help="unsigned 64-bit run seed")
        p.add_argument("--out", type=Path, required=out_required, help="output directory")
        p.add_argument("--data", type=Path, help="dataset JSONL (overrides paths.data_in)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("gen", help="generate a synthetic dataset"))

    p = common(sub.add_parser("train", help="train a baseline or single-context model"))
    p.add_argument("--context", choices=("baseline", "local", "global"))
    p.add_argument("--subjects-loocv", action="store_true", help="leave-one-subject-out instead of a split")

    for name, text in (("distill", "train a student against a frozen teacher"),
                       ("dml", "train two context models by mutual learning")):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("--context", choices=("local", "global"),
                       help="student context" if name == "distill" else "first network's context")
        p.add_argument("--T", dest="T", type=float, help="distillation temperature")
        p.add_argument("--lambda2", type=float, help="distillation weight; lambda1 = 1 - lambda2")
        p.add_argument("--loss", choices=("l2", "kl"))
        if name == "distill":
            p.add_argument("--teacher", type=Path, help="teacher checkpoint (overrides paths.model_in)")
            p.add_argument("--subjects-loocv", action="store_true")

    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--model", type=Path, help="checkpoint (overrides paths.model_in)")
    p.add_argument("--metric", choices=("map", "accuracy", "confusion"))
    p.add_argument("--split", choices=("test", "all"), default="test")

    p = common(sub.add_parser("sweep", help="(T, lambda2) grid for both teacher directions"))
    p.add_argument("--T", dest="T", type=_parse_floats, default=[2.0, 5.0, 10.0, 20.0])
    p.add_argument("--lambda2", type=_parse_floats, default=[0.3, 0.5, 0.7])
    p.add_argument("--loss", choices=("l2", "kl"))

    p = common(sub.add_parser("gradcheck", help="finite-difference check of the composed losses"), out_required=False)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)

    p = common(sub.add_parser("report", help="ablation table"))
    p.add_argument("--T", dest="T", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--loss", choices=("l2", "kl"))
    p.add_argument("--no-dml", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# config plumbing


def load_config(args) -> RunConfig:
    flat = RunConfig().flat()
    if getattr(args, "config", None):
        try:
            user = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(user) - set(flat)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        flat.update(user)
    if getattr(args, "seed", None) is not None:
        flat["seed"] = args.seed
    if getattr(args, "data", None) is not None:
        flat["paths.data_in"] = str(args.data)
    if getattr(args, "teacher", None) is not None:
        flat["paths.model_in"] = str(args.teacher)
    if getattr(args, "model", None) is not None:
        flat["paths.model_in"] = str(args.model)
    if getattr(args, "loss", None):
        flat["distill.loss_kind"] = args.loss
    T = getattr(args, "T", None)
    if isinstance(T, float):
        flat["distill.temperature"] = T
    lam = getattr(args, "lambda2", None)
    if isinstance(lam, float):
        flat["distill.lambda2"] = lam
        flat["distill.lambda1"] = 1.0 - lam
    ctx = getattr(args, "context", None)
    if ctx and args.command == "distill":
        flat["distill.student_context"] = ctx
        flat["distill.teacher_context"] = OTHER[ctx]
    if ctx:
        flat["train.context"] = ctx
    elif args.command == "distill":
        flat["train.context"] = flat["distill.student_context"]
    return RunConfig.from_flat(flat)


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def _load_data(rc: RunConfig):
    videos = read_jsonl(_require(rc.paths["data_in"], "dataset"))
    if not videos:
        raise ConfigError("dataset is empty")
    return videos


def _train_cfg(rc: RunConfig, videos) -> TrainConfig:
    mode = "multi_label" if videos[0].multi_label else "single_label"
    n_classes = rc.train.n_classes
    if not n_classes:
        n_classes = len(videos[0].labels) if mode == "multi_label" else max(v.label for v in videos) + 1
    return rc.train.replace(dataset_mode=mode, n_classes=n_classes)


def _splits(rc: RunConfig, prepared):
    train, val, test = split(prepared, rc.split["val_fraction"], rc.split["test_fraction"])
    return train, test


def write_manifest(out: Path, command: str, rc: RunConfig, metrics: Dict, outputs: Sequence[str]) -> None:
    manifest = {
        "command": command,
        "code_version": __version__,
        "seed": rc.seed,
        "config": rc.flat(),
        "metrics": metrics,
        "outputs": sorted(outputs),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, rc: RunConfig) -> Dict:
    videos = generate(rc.gen, rc.seed)
    write_jsonl(videos, args.out / "dataset.jsonl")
    return {"num_videos": len(videos), "outputs": ["dataset.jsonl"]}


def _loocv_metrics(result) -> Dict:
    return {
        "folds": [{"subject": f.subject, "accuracy": f.accuracy, "n_test": len(f.test_ids)} for f in result.folds],
        "mean_accuracy": result.mean_accuracy,
    }


def _eval_metrics(model: ModelState, data) -> Dict:
    report = evaluate(model.predict_logits(data), [p.target for p in data], model.config.dataset_mode)
    return report.to_dict()


def cmd_train(args, rc: RunConfig) -> Dict:
    videos = _load_data(rc)
    cfg = _train_cfg(rc, videos)
    if args.subjects_loocv:
        if cfg.dataset_mode != "single_label":
            raise ConfigError("leave-one-subject-out reports accuracy and needs single-label data")
        metrics = _loocv_metrics(loocv(videos, cfg))
        _write_json(args.out / "loocv.json", metrics)
        return {**metrics, "outputs": ["loocv.json"]}
    train, test = _splits(rc, prepare(videos))
    model = train_teacher(train, cfg)
    save_checkpoint(model, args.out / "model.json")
    metrics = _eval_metrics(model, test)
    _write_json(args.out / "metrics.json", metrics)
    return {**metrics, "outputs": ["model.json", "metrics.json"]}


def _dcfg(rc: RunConfig, cfg: TrainConfig, teacher_ctx: str, student_ctx: str) -> DistillConfig:
    d = rc.distill.to_dict()
    d.update(teacher_context=teacher_ctx, student_context=student_ctx)
    return DistillConfig(**d)


def cmd_distill(args, rc: RunConfig) -> Dict:
    videos = _load_data(rc)
    cfg = _train_cfg(rc, videos)
    dcfg = rc.distill
    if dcfg.teacher_context == dcfg.student_context:
        raise ConfigError("teacher and student contexts must differ")
    if args.subjects_loocv:
        metrics = _loocv_metrics(loocv(videos, cfg, dcfg))
        _write_json(args.out / "loocv.json", metrics)
        return {**metrics, "outputs": ["loocv.json"]}
    teacher = load_checkpoint(_require(rc.paths["model_in"], "teacher checkpoint"))
    if teacher.context != dcfg.teacher_context:
        raise ConfigError(
            f"teacher checkpoint has context {teacher.context!r}; student {dcfg.student_context!r} "
            f"needs a {dcfg.teacher_context!r} teacher"
        )
    before = teacher.checksum()
    train, test = _splits(rc, prepare(videos))
    student = train_student(train, teacher, cfg.replace(context=dcfg.student_context), dcfg)
    if teacher.checksum() != before:
        raise RuntimeError("teacher parameters changed during student training")
    save_checkpoint(student, args.out / "model.json")
    metrics = _eval_metrics(student, test)
    _write_json(args.out / "metrics.json", metrics)
    return {**metrics, "teacher_checksum": before, "outputs": ["model.json", "metrics.json"]}


def cmd_dml(args, rc: RunConfig) -> Dict:
    videos = _load_data(rc)
    cfg = _train_cfg(rc, videos)
    ctx_a = cfg.context if cfg.context in OTHER else "local"
    ctx_b = OTHER[ctx_a]
    train, test = _splits(rc, prepare(videos))
    a, b = train_dml(train, cfg.replace(context=ctx_a), cfg.replace(context=ctx_b), _dcfg(rc, cfg, ctx_b, ctx_a))
    metrics = {}
    for net in (a, b):
        save_checkpoint(net, args.out / f"model_{net.context}.json")
        metrics[net.context] = _eval_metrics(net, test)
    _write_json(args.out / "metrics.json", metrics)
    return {**metrics, "outputs": [f"model_{ctx_a}.json", f"model_{ctx_b}.json", "metrics.json"]}


def cmd_eval(args, rc: RunConfig) -> Dict:
    model = load_checkpoint(_require(rc.paths["model_in"], "checkpoint"))
    videos = _load_data(rc)
    prepared = prepare(videos)
    data = prepared if args.split == "all" else _splits(rc, prepared)[1]
    logits = model.predict_logits(data)
    targets = [p.target for p in data]
    mode = model.config.dataset_mode
    metric = args.metric or ("map" if mode == "multi_label" else "accuracy")
    if metric == "map" and mode != "multi_label":
        raise ConfigError("mAP needs multi-label data")
    if metric in ("accuracy", "confusion") and mode != "single_label":
        raise ConfigError(f"{metric} needs single-label data")
    full = evaluate(logits, targets, mode)
    report = EvalReport(mode=mode, n_samples=full.n_samples)
    outputs = ["report.json"]
    if metric == "map":
        report.map, report.per_class_ap = full.map, full.per_class_ap
    else:
        report.accuracy = full.accuracy
        if metric == "confusion":
            report.confusion = full.confusion
            report.confusion_to_csv(args.out / "confusion.csv")
            outputs.append("confusion.csv")
    report.to_json(args.out / "report.json")
    return {**report.to_dict(), "outputs": outputs}


def cmd_sweep(args, rc: RunConfig) -> Dict:
    videos = _load_data(rc)
    cfg = _train_cfg(rc, videos)
    loss_kind = args.loss or default_loss_kind(cfg.dataset_mode)
    train, test = _splits(rc, prepare(videos))
    rows = run_sweep(train, test, cfg, args.T, args.lambda2, loss_kind)
    header = ["T", "lambda2", "global_teacher", "local_teacher"]
    table = [[r[h] for h in header] for r in rows]
    (args.out / "sweep.csv").write_text(rows_to_csv(header, table))
    (args.out / "sweep.txt").write_text(format_table(["T", "lambda2", "Global-teacher", "Local-teacher"],
                                                     [[f"{r[0]:g}", f"{r[1]:g}", r[2], r[3]] for r in table]))
    return {"rows": rows, "outputs": ["sweep.csv", "sweep.txt"]}


def cmd_report(args, rc: RunConfig) -> Dict:
    videos = _load_data(rc)
    cfg = _train_cfg(rc, videos)
    dcfg = rc.distill
    if not args.loss and "distill.loss_kind" not in _user_keys(args):
        dcfg = DistillConfig(**{**dcfg.to_dict(), "loss_kind": default_loss_kind(cfg.dataset_mode)})
    train, test = _splits(rc, prepare(videos))
    rows = run_ablation(train, test, cfg, dcfg, dml=not args.no_dml)
    metric = "accuracy" if cfg.dataset_mode == "single_label" else "map"
    (args.out / "report.csv").write_text(rows_to_csv(["model", metric], rows))
    (args.out / "report.txt").write_text(format_table(["Model", metric + " %"], rows))
    return {"rows": dict(rows), "outputs": ["report.csv", "report.txt"]}


def _user_keys(args) -> set:
    if not getattr(args, "config", None):
        return set()
    return set(json.loads(Path(args.config).read_text()))


def cmd_gradcheck(args, rc: RunConfig) -> Dict:
    summaries = student_gradcheck(args.trials, rc.seed)
    passed = True
    for s in summaries:
        ok = s.passed(args.tol)
        passed &= ok
        print(f"{s.context:6s} {s.loss}: {s.tally.describe()}{'' if ok else '  FAIL'}")
    worst = max(s.tally.worst_rel for s in summaries)
    print(f"gradcheck {'PASS' if passed else 'FAIL'} (worst {worst:.3e}, tol {args.tol:g})")
    if args.out:
        _write_json(args.out / "gradcheck.json", [s.to_dict() for s in summaries])
    return {"worst": worst, "passed": passed, "outputs": ["gradcheck.json"] if args.out else []}


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "distill": cmd_distill,
    "dml": cmd_dml,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_config(args)
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, rc)
        if args.out:
            outputs = result.pop("outputs", [])
            write_manifest(args.out, args.command, rc, result, outputs)
        if args.command == "gradcheck" and not result["passed"]:
            return EXIT_ERROR
    except (ConfigError, ValueError, OSError) as exc:
        print(f"glidn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
