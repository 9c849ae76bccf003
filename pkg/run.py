# run.py
"""Single entry point: `python run.py <subcommand> [--config FILE] [--out DIR] ...`."""
import os

# One BLAS thread so results do not depend on the machine; must precede the numpy import.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from pydantic import ValidationError
from rapidfuzz import process

from config import ExperimentConfig, load_experiment_config, settings
from datagen import gen_clusters, write_dataset
from errors import InvalidInput, LabError, SpecError, UsageError
from exporters import (
    file_hash, summary_to_docx, write_curve_csv, write_epoch_csv, write_json, write_manifest, write_summary_txt,
)
from geometry import analyze_geometry, write_points_csv, write_scatter_svg
from gradcore import load_checkpoint
from ledger import CellRow, EpochRow, RunLedger
from losses import logistic_curve_minimum, smoothed_logistic_curve
from metrics import (
    class_mean_profile, group_by_label, read_prob_dump, report_dict, stability_report,
    write_prob_dump, write_stability_report,
)
from pipeline import (
    ExperimentLog, MatrixResult, distill_student, evaluate, prepare_data, run_class_count_study,
    run_longtail_study, run_matrix, train_teacher,
)

logger = logging.getLogger("lsdistill")

SUBCOMMANDS = ("gen-data", "train", "distill", "evaluate", "metrics", "geometry",
               "curves", "matrix", "report", "study")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


@dataclass(frozen=True)
class CliInvocation:
    subcommand: str
    config: Optional[Path] = None
    out: Optional[Path] = None
    seed: Optional[int] = None
    verbosity: int = 0
    options: Dict = field(default_factory=dict)  # subcommand-specific flags

    @property
    def out_dir(self) -> Path:
        return settings.output_dir_for(self.subcommand, str(self.out) if self.out else None)


# ---------- Parsing ----------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--out", type=Path, help=f"output dir (default ${{LSDISTILL_OUTPUT_ROOT}}/<subcommand>)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="lsdistill", description="Label smoothing / distillation lab")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sub.add_parser("gen-data", parents=[common], help="write a synthetic cluster dataset")
    sub.add_parser("train", parents=[common], help="train one teacher per configured alpha")

    p = sub.add_parser("distill", parents=[common], help="distill students from a teacher checkpoint")
    p.add_argument("--teacher", type=Path, required=True)

    p = sub.add_parser("evaluate", parents=[common], help="top-1/top-k accuracy of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--topk", type=int, nargs="+", default=None)

    p = sub.add_parser("metrics", parents=[common], help="stability report from a probability dump")
    p.add_argument("--probs", type=Path, required=True)
    p.add_argument("--ddof", type=int, choices=[0, 1], default=None)

    p = sub.add_parser("geometry", parents=[common], help="template-plane projection of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("curves", parents=[common], help="smoothed logistic loss curve")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--zmin", type=float, default=-10.0)
    p.add_argument("--zmax", type=float, default=10.0)
    p.add_argument("--steps", type=int, default=200)

    for name, help_text in (("matrix", "seed x alpha x setting matrix"),
                            ("study", "long-tail or class-count LS-gain study")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--seeds", type=int, help="use seeds 0..N-1")
        p.add_argument("--workers", type=int, default=settings.default_workers)
        if name == "study":
            p.add_argument("--kind", choices=["long-tail", "num-classes"], required=True)

    p = sub.add_parser("report", parents=[common], help="render summary.json as text and DOCX")
    p.add_argument("--run", type=Path, help="matrix output dir holding summary.json")
    return parser


def parse_invocation(argv: List[str]) -> CliInvocation:
    if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
        guess = process.extractOne(argv[0], SUBCOMMANDS)
        hint = f"; did you mean '{guess[0]}'?" if guess and guess[1] >= 60 else ""
        raise UsageError(f"unknown subcommand '{argv[0]}'{hint}")
    args = build_parser().parse_args(argv)
    known = {"subcommand", "config", "out", "seed", "verbose"}
    return CliInvocation(
        subcommand=args.subcommand,
        config=args.config,
        out=args.out,
        seed=args.seed,
        verbosity=args.verbose,
        options={k: v for k, v in vars(args).items() if k not in known},
    )


def _load_config(inv: CliInvocation) -> ExperimentConfig:
    """Config file plus the seed overrides: `--seed S` runs only S, `--seeds N` runs 0..N-1."""
    cfg = load_experiment_config(inv.config) if inv.config else ExperimentConfig()
    if inv.seed is not None:
        cfg = cfg.with_seeds([inv.seed])
    elif inv.options.get("seeds") is not None:
        cfg = cfg.with_seeds(range(inv.options["seeds"]))
    return cfg


# Folded into the config (seeds) or never changing any output (workers).
_NOT_IN_COMMAND = frozenset({"seeds", "workers"})


def _option_value(value):
    if isinstance(value, Path):
        # input files are identified by content as well as by name
        return {"path": str(value), "sha256": file_hash(value)} if value.is_file() else str(value)
    return value


def effective_config(inv: CliInvocation, cfg: ExperimentConfig) -> Dict:
    """What the manifest records and hashes: the config after overrides plus the subcommand flags."""
    command = {"subcommand": inv.subcommand}
    command.update((k, _option_value(v)) for k, v in sorted(inv.options.items()) if k not in _NOT_IN_COMMAND)
    return {**cfg.resolved(), "command": command}


def _out_dir(inv: CliInvocation, cfg: Optional[ExperimentConfig] = None) -> Path:
    if inv.out is None and cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return inv.out_dir


def _write_log(out: Path, prefix: str, log: ExperimentLog) -> None:
    write_epoch_csv(out / f"{prefix}_epochs.csv", log.epochs)
    if log.probs is not None:
        write_prob_dump(out / f"{prefix}_probs.csv", log.probs, log.prob_labels)
    if log.stability is not None:
        write_json(out / f"{prefix}_stability.json", report_dict(log.stability, log.profile))


# ---------- Subcommands ----------

def cmd_gen_data(inv: CliInvocation, cfg: ExperimentConfig, out: Path) -> None:
    spec = cfg.data.cluster_spec
    if spec is None:
        raise UsageError("gen-data needs a clusters data config, not a file")
    # same stream prepare_data uses for cfg.seeds[0]
    spec = spec.model_copy(update={"seed": spec.seed + cfg.seeds[0]})
    write_dataset(out / "dataset.csv", gen_clusters(spec), spec.model_dump(mode="json"))


def cmd_train(inv: CliInvocation, cfg: ExperimentConfig, out: Path) -> None:
    seed = cfg.seeds[0]
    data = prepare_data(cfg, seed)
    timings = {}
    for alpha in cfg.teacher.alphas:
        prefix = f"teacher_a{alpha:g}"
        _, log = train_teacher(cfg, seed, alpha, data, checkpoint=out / f"{prefix}.ckpt")
        _write_log(out, prefix, log)
        if log.geometry is not None:
            write_json(out / f"{prefix}_geometry.json", log.geometry.summary())
        timings[prefix] = log.wall_time
    write_json(out / "timings.json", timings)


def cmd_distill(inv: CliInvocation, cfg: ExperimentConfig, out: Path) -> None:
    teacher, _ = load_checkpoint(inv.options["teacher"])
    seed = cfg.seeds[0]
    data = prepare_data(cfg, seed)
    timings = {}
    for setting in cfg.distill:
        prefix = f"student_{setting.label}"
        _, log = distill_student(teacher, cfg, seed, setting, data, checkpoint=out / f"{prefix}.ckpt")
        _write_log(out, prefix, log)
        timings[prefix] = log.wall_time
    write_json(out / "timings.json", timings)


def cmd_evaluate(inv: CliInvocation, cfg: ExperimentConfig, out: Path) -> None:
    model, header = load_checkpoint(inv.options["checkpoint"])
    train, val = prepare_data(cfg, cfg.seeds[0])
    data = train if inv.options["split"] == "train" else val
    K = model.spec.num_classes
    topk = inv.options["topk"] or sorted({1, min(cfg.analysis.topk, K)})
    acc = evaluate(model, data, topk)
    write_json(out / "evaluation.json", {
        "split": inv.options["split"], "epoch": header["epoch"],
        "accuracy": {f"top{k}": v for k, v in acc.items()},
    })


def cmd_metrics(inv: CliInvocation, cfg: ExperimentConfig, out: Path) -> None:
    probs, labels = read_prob_dump(inv.options["probs"])
    ddof = inv.options["ddof"] if inv.options["ddof"] is not None else cfg.analysis.alg1_ddof
    grouped = group_by_label(probs, labels, probs.shape[1])
    write_stability_report(out / "stability_report.json", stability_report(grouped, ddof),
                           class_mean_profile(grouped))


def cmd_geometry(inv: CliInvocation, cfg: ExperimentConfig, out: Path) -> None:
    model, _ = load_checkpoint(inv.options["checkpoint"])
    train, val = prepare_data(cfg, cfg.seeds[0])
    data = train if cfg.analysis.split == "train" else val
    spec = cfg.data.cluster_spec
    pair = cfg.analysis.similar_pair or (spec.similar_pair if spec else (0, 1))
    report = analyze_geometry(model, data.features, data.labels, pair, cfg.analysis.reference_class)
    write_points_csv(out / "points.csv", report)
    write_scatter_svg(out / "scatter.svg", report)
    write_json(out / "geometry.json", report.summary())
    print(f"D_c full={report.full.d_c:.6f} plane={report.plane.d_c:.6f} "
          f"spread full={report.full.mean_spread:.6f} plane={report.plane.mean_spread:.6f}")


def cmd_curves(inv: CliInvocation, cfg: ExperimentConfig, out: Path) -> None:
    o = inv.options
    if o["steps"] < 2 or not o["zmin"] < o["zmax"]:
        raise UsageError("curves needs --steps >= 2 and --zmin < --zmax")
    points = smoothed_logistic_curve(np.linspace(o["zmin"], o["zmax"], o["steps"]), o["alpha"])
    write_curve_csv(out / "curve.csv", o["alpha"], points)
    z_star, value = logistic_curve_minimum(o["alpha"])
    write_json(out / "curve_minimum.json", {"alpha": o["alpha"], "z_min": z_star, "loss_min": value})


def _record_ledger(out: Path, result: MatrixResult) -> None:
    ledger = RunLedger.in_dir(out)
    try:
        for c in result.cells:
            ledger.record_cell(CellRow(c.cell_id, c.seed, c.alpha, c.setting.label, c.status,
                                       c.error_code, c.message))
            for role, log in (("teacher", c.teacher_log), ("student", c.student_log)):
                if log is not None:
                    ledger.record_epochs(EpochRow(c.cell_id, role, e.epoch, e.train_loss, e.val_top1, e.val_topk)
                                         for e in log.epochs)
    finally:
        ledger.close()


def cmd_matrix(inv: CliInvocation, cfg: ExperimentConfig, out: Path) -> None:
    result = run_matrix(cfg, workers=inv.options["workers"], out_dir=out)
    timings = {}
    written_teachers = set()
    for c in result.cells:
        tkey = f"s{c.seed:03d}_a{c.alpha:g}"
        if c.teacher_log is not None and tkey not in written_teachers:
            _write_log(out / "teachers" / tkey, "teacher", c.teacher_log)
            written_teachers.add(tkey)
        if c.student_log is not None:
            _write_log(out / "cells" / c.cell_id, "student", c.student_log)
        timings[c.cell_id] = {
            "teacher": c.teacher_log.wall_time if c.teacher_log else None,
            "student": c.student_log.wall_time if c.student_log else None,
        }
    write_json(out / "summary.json", result.summary)
    write_summary_txt(out / "summary.txt", result.summary)
    write_json(out / "timings.json", timings)
    _record_ledger(out, result)


def cmd_report(inv: CliInvocation, cfg: ExperimentConfig, out: Path) -> None:
    run_dir = inv.options["run"] or out
    src = Path(run_dir) / "summary.json"
    if not src.exists():
        raise UsageError(f"no summary.json in {run_dir}")
    summary = json.loads(src.read_text(encoding="utf-8"))
    write_summary_txt(out / "report.txt", summary)
    summary_to_docx(summary, out / "report.docx")


def cmd_study(inv: CliInvocation, cfg: ExperimentConfig, out: Path) -> None:
    runner = run_longtail_study if inv.options["kind"] == "long-tail" else run_class_count_study
    write_json(out / f"study_{inv.options['kind']}.json", runner(cfg, workers=inv.options["workers"]))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "metrics": cmd_metrics,
    "geometry": cmd_geometry,
    "curves": cmd_curves,
    "matrix": cmd_matrix,
    "report": cmd_report,
    "study": cmd_study,
}


def dispatch(inv: CliInvocation) -> int:
    handler = COMMANDS.get(inv.subcommand)
    if handler is None:
        raise UsageError(f"unknown subcommand '{inv.subcommand}'")
    cfg = _load_config(inv)
    out = _out_dir(inv, cfg)
    out.mkdir(parents=True, exist_ok=True)
    handler(inv, cfg, out)
    write_manifest(out, inv.subcommand, effective_config(inv, cfg))
    logger.info("%s: outputs in %s", inv.subcommand, out)
    return EXIT_OK


def _validation_error(e: ValidationError) -> LabError:
    for err in e.errors():
        exc = (err.get("ctx") or {}).get("error")
        if isinstance(exc, LabError):
            return exc
    return SpecError(str(e))


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        inv = parse_invocation(argv)
    except UsageError as e:
        print(f"error[{e.code}]: {e.detail}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # argparse usage errors and --help
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(inv.verbosity, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return dispatch(inv)
    except UsageError as e:
        print(f"error[{e.code}]: {e.detail}", file=sys.stderr)
        return EXIT_USAGE
    except LabError as e:
        print(f"error[{e.code}]: {e.detail}", file=sys.stderr)
        return EXIT_DOMAIN
    except ValidationError as e:
        err = _validation_error(e)
        print(f"error[{err.code}]: {err.detail}", file=sys.stderr)
        return EXIT_DOMAIN
    except (OSError, ValueError) as e:  # unreadable or malformed input files
        err = InvalidInput(str(e))
        print(f"error[{err.code}]: {err.detail}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
