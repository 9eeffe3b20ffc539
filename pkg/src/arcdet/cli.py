"""``arcdet`` command line: pretrain, adapt, eval, report, gradcheck, generate.

Exit codes: 0 success, 1 bad arguments or input, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__, gradcheck
from .checkpoint import Checkpoint, CheckpointError
from .fusion import Branch, VetoConfig, write_detections
from .metrics import EvalReport, evaluate, forgetting_measure, relative_forgetting, report_to_csv, report_to_text
from .model import checkpoint_of, detector_from_checkpoint, load_model, verify_frozen
from .synth import BASE_CLASSES, CLASS_NAMES, MIXES, TASK_CLASSES, Dataset, build_splits, dump, generate
from .tensor import GradientError
from .trainer import MODES, STREAM_DATA, RunConfig, TrainingDiverged, adapt, build_for_mode, pretrain_base, write_log

log = logging.getLogger("arcdet")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

SPLIT_CLASSES = {"base": BASE_CLASSES, "task": TASK_CLASSES, "mixed": BASE_CLASSES + TASK_CLASSES}


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared plumbing


def data_seed(seed: int) -> int:
    return seed * 1000 + STREAM_DATA


def load_config(path: str | None) -> RunConfig:
    return RunConfig() if path is None else RunConfig.load(path)


def eval_split(cfg: RunConfig, seed: int, split: str) -> Dataset:
    """Held-out images for a split: the test part of base/task, the whole mixed pool."""
    count = {"base": cfg.base_scenes, "task": cfg.task_scenes, "mixed": cfg.mixed_scenes}[split]
    if split == "mixed":
        return Dataset.from_scenes(generate(data_seed(seed), count, "mixed", cfg.input_size))
    return build_splits(data_seed(seed), count, split)["test"]


def run_eval(model, ds: Dataset, split: str, cfg: RunConfig, veto: bool):
    vcfg = VetoConfig(cfg.veto_iou, cfg.veto_conf) if veto else None
    dets = model.predict(ds.images, ds.image_ids, cfg.conf_threshold, cfg.nms_iou, veto=vcfg)
    return dets, evaluate(dets, ds.all_gts(), SPLIT_CLASSES[split], CLASS_NAMES)


def write_report(out: Path, stem: str, report: EvalReport, title: str) -> list[Path]:
    csv_path, txt_path = out / f"{stem}.csv", out / f"{stem}.txt"
    csv_path.write_text(report_to_csv(report), encoding="utf-8")
    txt_path.write_text(report_to_text(report, title), encoding="utf-8")
    return [csv_path, txt_path]


def write_summary(out: Path, rows: dict[str, object]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for k, v in rows.items():
        w.writerow([k, repr(v) if isinstance(v, float) else v])
    path = out / "summary.csv"
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_summary(path: Path) -> dict[str, str]:
    rows = list(csv.reader(io.StringIO(path.read_text(encoding="utf-8"))))
    if not rows or rows[0] != ["key", "value"]:
        raise UsageError(f"{path}: not a run summary")
    return {r[0]: r[1] for r in rows[1:] if len(r) == 2}


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_id() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=10)
        if res.returncode == 0 and res.stdout.strip():
            return res.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"arcdet-{__version__}"


def write_manifest(out: Path, command: str, args: argparse.Namespace, artifacts: Sequence[Path],
                   extra: dict | None = None) -> Path:
    """The only file that carries a timestamp."""
    manifest = {
        "command": command,
        "mode": getattr(args, "mode", command),
        "seeds": {"seed": getattr(args, "seed", None)},
        "config": getattr(args, "config", None),
        "output_dir": str(out),
        "build": build_id(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "artifacts": {p.name: _digest(p) for p in artifacts},
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    base = build_splits(data_seed(args.seed), cfg.base_scenes, "base")
    model, history = pretrain_base(base["train"], cfg, args.seed)
    ckpt_path = out / "checkpoint.arck"
    checkpoint_of(model).save(ckpt_path)
    write_log(history, out / "train_log.csv")
    artifacts = [ckpt_path, out / "train_log.csv"]
    _, base_rep = run_eval(model, base["test"], "base", cfg, veto=False)
    _, task_rep = run_eval(model, eval_split(cfg, args.seed, "task"), "task", cfg, veto=False)
    artifacts += write_report(out, "report_base", base_rep, "pretrained / base split")
    artifacts += write_report(out, "report_task", task_rep, "pretrained / task split")
    artifacts.append(write_summary(out, {
        "mode": "pretrained", "seed": args.seed, "task_map50": task_rep.map50, "base_map50": base_rep.map50,
        "base_map5095": base_rep.map5095, "base_map_before": base_rep.map50}))
    write_manifest(out, "pretrain", args, artifacts, {"checkpoints": [str(ckpt_path)]})
    print(f"base mAP@0.5 {base_rep.map50:.4f} (floor {cfg.map_floor}), task mAP@0.5 {task_rep.map50:.4f}")
    if base_rep.map50 < cfg.map_floor:
        print(f"error: base mAP@0.5 {base_rep.map50:.4f} below floor {cfg.map_floor}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    base_ckpt = Checkpoint.load(args.base_ckpt)
    out = _out_dir(args)
    base = build_splits(data_seed(args.seed), cfg.base_scenes, "base")
    task = build_splits(data_seed(args.seed), cfg.task_scenes, "task")

    pretrained = detector_from_checkpoint(base_ckpt, cfg.input_size)
    _, before_rep = run_eval(pretrained, base["test"], "base", cfg, veto=False)

    model = build_for_mode(args.mode, base_ckpt, cfg, args.seed)
    before = checkpoint_of(model)
    history = adapt(model, args.mode, base["train"], task["train"], cfg, args.seed)
    after = checkpoint_of(model)
    frozen_ok = verify_frozen(model, before, after)

    ckpt_path = out / "checkpoint.arck"
    after.save(ckpt_path)
    write_log(history, out / "train_log.csv")
    artifacts = [ckpt_path, out / "train_log.csv"]
    veto = args.mode == "arc"
    reports = {}
    for split, ds in (("base", base["test"]), ("task", task["test"]), ("mixed", eval_split(cfg, args.seed, "mixed"))):
        _, reports[split] = run_eval(model, ds, split, cfg, veto=veto and split == "mixed")
        artifacts += write_report(out, f"report_{split}", reports[split], f"{args.mode} / {split} split")
    b0, b1 = before_rep.map50, reports["base"].map50
    artifacts.append(write_summary(out, {
        "mode": args.mode, "seed": args.seed, "task_map50": reports["task"].map50, "base_map50": b1,
        "base_map5095": reports["base"].map5095, "base_map_before": b0,
        "forgetting_points": forgetting_measure(b0, b1), "frozen_unchanged": frozen_ok}))
    write_manifest(out, "adapt", args, artifacts,
                   {"checkpoints": [str(ckpt_path)], "base_checkpoint": str(args.base_ckpt),
                    "base_map_before": b0, "verify_frozen": frozen_ok})
    print(f"{args.mode}: task mAP@0.5 {reports['task'].map50:.4f}, base mAP@0.5 {b1:.4f} "
          f"(before {b0:.4f}), protected weights unchanged: {frozen_ok}")
    if args.mode == "arc" and not frozen_ok:
        print("error: frozen parameters changed during arc adaptation", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = load_model(Checkpoint.load(args.ckpt), cfg.input_size)
    out = _out_dir(args)
    ds = eval_split(cfg, args.seed, args.split)
    dets, rep = run_eval(model, ds, args.split, cfg, veto=args.veto == "on")
    stem = f"eval_{args.split}_veto{args.veto}"
    artifacts = write_report(out, stem, rep, f"{args.ckpt} / {args.split} split / veto {args.veto}")
    write_detections(out / f"{stem}_detections.tsv", dets)
    artifacts.append(out / f"{stem}_detections.tsv")
    write_manifest(out, "eval", args, artifacts, {"checkpoints": [str(args.ckpt)]})
    n_spec = sum(d.branch is Branch.SPECIALIST for d in dets)
    print(report_to_text(rep, f"{args.split} split, veto {args.veto}"), end="")
    print(f"specialist detections: {n_spec}")
    return EXIT_OK


def format_table(rows: list[dict[str, str]]) -> str:
    head = f"{'run':<24}{'mode':<12}{'task mAP50':>11}{'base mAP50':>11}{'forget pts':>11}{'forget %':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        b0, b1 = float(r["base_map_before"]), float(r["base_map50"])
        rel = relative_forgetting(b0, b1)
        lines.append(f"{r['run'][-24:]:<24}{r['mode']:<12}{float(r['task_map50']) * 100:>11.1f}"
                     f"{b1 * 100:>11.1f}{forgetting_measure(b0, b1):>+11.1f}"
                     f"{'n/a' if rel is None else f'{rel:+.1f}':>10}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        path = Path(run) / "summary.csv"
        if not path.is_file():
            raise UsageError(f"run directory {run} has no summary.csv")
        row = read_summary(path)
        missing = {"mode", "task_map50", "base_map50", "base_map_before"} - set(row)
        if missing:
            raise UsageError(f"{path} lacks {sorted(missing)}")
        rows.append({**row, "run": str(run)})
    table = format_table(rows)
    print(table, end="")
    if args.out:
        out = _out_dir(args)
        (out / "comparison.txt").write_text(table, encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.cases < 1:
        raise UsageError("--cases must be >= 1")
    results = gradcheck.run(args.seed, args.cases)
    for r in results:
        print(f"{r.op:<16} max_rel_err {r.max_rel_err:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"error: gradient check failed for {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    dump(generate(data_seed(args.seed), args.count, args.mix), _out_dir(args))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    default_out = os.environ.get("ARC_OUT_DIR", "arc_out")
    p = _Parser(prog="arcdet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=default_out, help="output directory (default: $ARC_OUT_DIR or ./arc_out)")
        if config:
            sp.add_argument("--config", help="flat key = value run configuration")

    sp = sub.add_parser("pretrain", help="train the base detector")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("adapt", help="add the task class by fine-tuning, joint training or ARC")
    sp.add_argument("--mode", choices=MODES, required=True)
    sp.add_argument("--base-ckpt", required=True)
    common(sp)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", choices=tuple(SPLIT_CLASSES), required=True)
    sp.add_argument("--veto", choices=("on", "off"), default="off")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="compare finished runs")
    sp.add_argument("--runs", nargs="+", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--cases", type=int, default=20)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("generate", help="write synthetic scenes to disk")
    sp.add_argument("--mix", choices=MIXES, default="base")
    sp.add_argument("--count", type=int, default=10)
    common(sp, config=False)
    sp.set_defaults(func=cmd_generate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingDiverged, GradientError, FloatingPointError, NumericFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
