# pipeline.py
"""Teacher training, distillation, evaluation and the seeded experiment matrix."""
from __future__ import annotations
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import binomtest, pearsonr, spearmanr
from tqdm import tqdm

from config import DistillConfig, ExperimentConfig, LongTailSpec
from datagen import LabeledDataset, curate_subset, gen_clusters, pareto_resample, read_dataset, split
from errors import CacheError, DivergenceError, GeometryError, InvalidInput, LabError, SpecError
from geometry import GeometryReport, analyze_geometry
from gradcore import Model, NetworkSpec, fit, forward, init_model, parameter_hash, save_checkpoint
from losses import ce_loss_and_grad, distill_loss_and_grad, smooth_label_rows, softmax_rows
from metrics import ClassMeanProfile, StabilityReport, class_mean_profile, group_by_label, stability_report

logger = logging.getLogger(__name__)

Split = Tuple[LabeledDataset, LabeledDataset]


# ---------- Logs ----------

@dataclass(frozen=True)
class EpochEntry:
    epoch: int
    train_loss: float
    val_top1: float
    val_topk: float


@dataclass
class ExperimentLog:
    role: str                      # "teacher" | "student"
    topk: int
    epochs: List[EpochEntry] = field(default_factory=list)
    stability: Optional[StabilityReport] = None
    profile: Optional[ClassMeanProfile] = None
    geometry: Optional[GeometryReport] = None
    probs: Optional[np.ndarray] = None        # outputs on the analysis split
    prob_labels: Optional[np.ndarray] = None
    train_top1: Optional[float] = None
    wall_time: float = 0.0

    def append(self, entry: EpochEntry) -> None:
        if entry.epoch != len(self.epochs):
            raise CacheError(f"{self.role} log expects epoch {len(self.epochs)}, got {entry.epoch}")
        for name in ("val_top1", "val_topk"):
            v = getattr(entry, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidInput(f"{name}={v} outside [0, 1]")
        self.epochs.append(entry)

    @property
    def final(self) -> Optional[EpochEntry]:
        return self.epochs[-1] if self.epochs else None

    @property
    def final_val_top1(self) -> float:
        return self.final.val_top1 if self.final else float("nan")

    @property
    def final_train_loss(self) -> float:
        return self.final.train_loss if self.final else float("nan")


# ---------- Data ----------

def source_dataset(cfg: ExperimentConfig, seed: int, num_classes: Optional[int] = None) -> LabeledDataset:
    if cfg.data.file is not None:
        return read_dataset(cfg.data.file)
    spec = cfg.data.cluster_spec
    changes = {"seed": spec.seed + seed}
    if num_classes is not None:
        changes["num_classes"] = num_classes
    return gen_clusters(spec.model_copy(update=changes))


def prepare_data(cfg: ExperimentConfig, seed: int, long_tail: Optional[LongTailSpec] = None,
                 curate: Optional[int] = None, source: Optional[LabeledDataset] = None) -> Split:
    """Generate or load, curate, split; long-tail resampling touches the train split only."""
    ds = source if source is not None else source_dataset(cfg, seed)
    k = curate if curate is not None else cfg.data.curate_classes
    if k is not None and k != ds.num_classes:
        ds = curate_subset(ds, k, seed)
    train, val = split(ds, cfg.data.val_fraction, seed)
    lt = long_tail if long_tail is not None else cfg.data.long_tail
    if lt is not None:
        train = pareto_resample(train, lt.model_copy(update={"seed": lt.seed + seed}))
    return train, val


# ---------- Evaluation ----------

def evaluate(model: Model, data: LabeledDataset, topk: Sequence[int]) -> Dict[int, float]:
    """Top-k accuracy; among equal logits the lower class index ranks first."""
    K = model.spec.num_classes
    for k in topk:
        if not (1 <= k <= K):
            raise SpecError(f"top-{k} accuracy needs 1 <= k <= {K}")
    logits = forward(model, data.features).logits
    labels = data.labels
    true = logits[np.arange(labels.size), labels][:, None]
    classes = np.arange(K)[None, :]
    rank = (logits > true).sum(axis=1) + ((logits == true) & (classes < labels[:, None])).sum(axis=1)
    return {int(k): float(np.mean(rank < k)) for k in topk}


def _analyse(log: ExperimentLog, model: Model, cfg: ExperimentConfig, train: LabeledDataset,
             val: LabeledDataset, with_geometry: bool) -> None:
    data = train if cfg.analysis.split == "train" else val
    probs = softmax_rows(forward(model, data.features).logits)
    grouped = group_by_label(probs, data.labels, data.num_classes)
    log.stability = stability_report(grouped, cfg.analysis.alg1_ddof)
    log.profile = class_mean_profile(grouped)
    log.probs, log.prob_labels = probs, data.labels
    log.train_top1 = evaluate(model, train, [1])[1]
    if not with_geometry:
        return
    pair = cfg.analysis.similar_pair or (cfg.data.cluster_spec.similar_pair if cfg.data.cluster_spec else (0, 1))
    try:
        log.geometry = analyze_geometry(model, data.features, data.labels, pair, cfg.analysis.reference_class)
    except (GeometryError, SpecError) as e:
        logger.warning("geometry skipped: %s", e)


def _epoch_hook(log: ExperimentLog, val: LabeledDataset) -> Callable[[int, Model, float], None]:
    def on_epoch(epoch: int, model: Model, mean_loss: float) -> None:
        acc = evaluate(model, val, sorted({1, log.topk}))
        log.append(EpochEntry(epoch, mean_loss, acc[1], acc[log.topk]))
    return on_epoch


def _build_spec(net, input_dim: int, K: int) -> NetworkSpec:
    return NetworkSpec.mlp(input_dim, net.hidden, K, net.activation, net.binary_weights, net.clip_bound)


# ---------- Teacher / student ----------

def train_teacher(cfg: ExperimentConfig, seed: int, alpha: float, data: Optional[Split] = None,
                  checkpoint: Optional[str | Path] = None, analyse: bool = True) -> Tuple[Model, ExperimentLog]:
    train, val = data or prepare_data(cfg, seed)
    K = train.num_classes
    targets = smooth_label_rows(train.labels, alpha, K)
    model = init_model(_build_spec(cfg.teacher.network, train.dim, K), 2 * seed)
    tcfg = cfg.teacher.train.model_copy(update={"seed": cfg.teacher.train.seed + seed})
    log = ExperimentLog(role="teacher", topk=min(cfg.analysis.topk, K))

    def batch_loss(idx: np.ndarray, logits: np.ndarray):
        return ce_loss_and_grad(logits, targets[idx])

    started = time.perf_counter()
    try:
        model = fit(model, train.features, batch_loss, tcfg, _epoch_hook(log, val), stream=0)
    except DivergenceError as e:
        log.wall_time = time.perf_counter() - started
        raise DivergenceError(e.detail, partial_log=log) from e
    if analyse:
        _analyse(log, model, cfg, train, val, with_geometry=True)
    log.wall_time = time.perf_counter() - started
    if checkpoint is not None:
        save_checkpoint(checkpoint, model, tcfg.epochs)
    logger.info("teacher seed=%d alpha=%g val_top1=%.4f", seed, alpha, log.final_val_top1)
    return model, log


def distill_student(teacher: Model, cfg: ExperimentConfig, seed: int, setting: DistillConfig,
                    data: Optional[Split] = None, checkpoint: Optional[str | Path] = None
                    ) -> Tuple[Model, ExperimentLog]:
    train, val = data or prepare_data(cfg, seed)
    K = train.num_classes
    if teacher.spec.num_classes != K or teacher.spec.input_dim != train.dim:
        raise SpecError("teacher does not match the dataset's width or class count")
    frozen_hash = parameter_hash(teacher)
    teacher_logits = forward(teacher, train.features).logits
    hard = smooth_label_rows(train.labels, 0.0, K)

    if cfg.student.init_from_teacher:
        student = replace(teacher, version=0, velocity=None, seed=2 * seed + 1)
    else:
        student = init_model(_build_spec(cfg.student.network, train.dim, K), 2 * seed + 1)
    scfg = cfg.student.train.model_copy(update={"seed": cfg.student.train.seed + seed})
    log = ExperimentLog(role="student", topk=min(cfg.analysis.topk, K))

    def batch_loss(idx: np.ndarray, logits: np.ndarray):
        return distill_loss_and_grad(logits, teacher_logits[idx], hard[idx], setting)

    started = time.perf_counter()
    try:
        student = fit(student, train.features, batch_loss, scfg, _epoch_hook(log, val), stream=1)
    except DivergenceError as e:
        log.wall_time = time.perf_counter() - started
        raise DivergenceError(e.detail, partial_log=log) from e
    if parameter_hash(teacher) != frozen_hash:
        raise CacheError("teacher parameters changed during distillation")
    _analyse(log, student, cfg, train, val, with_geometry=False)
    log.wall_time = time.perf_counter() - started
    if checkpoint is not None:
        save_checkpoint(checkpoint, student, scfg.epochs)
    logger.info("student seed=%d %s val_top1=%.4f", seed, setting.label, log.final_val_top1)
    return student, log


# ---------- Matrix ----------

def cell_id(seed: int, alpha: float, setting: DistillConfig) -> str:
    return f"s{seed:03d}_a{alpha:g}_{setting.label}"


@dataclass
class CellResult:
    cell_id: str
    seed: int
    alpha: float
    setting: DistillConfig
    status: str = "ok"
    error_code: Optional[str] = None
    message: Optional[str] = None
    teacher_log: Optional[ExperimentLog] = None
    student_log: Optional[ExperimentLog] = None
    teacher_hash: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _failed(cell: CellResult, err: LabError) -> CellResult:
    cell.status, cell.error_code, cell.message = "failed", err.code, err.detail
    if isinstance(err, DivergenceError) and err.partial_log is not None:
        if err.partial_log.role == "teacher":
            cell.teacher_log = err.partial_log
        else:
            cell.student_log = err.partial_log
    logger.warning("cell %s failed: %s", cell.cell_id, err)
    return cell


def run_job(cfg: ExperimentConfig, seed: int, alpha: float, out_dir: Optional[str] = None) -> List[CellResult]:
    """One teacher per (seed, alpha); every distillation setting is distilled from it."""
    cells = [CellResult(cell_id(seed, alpha, s), seed, alpha, s) for s in cfg.distill]
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir else None
    try:
        data = prepare_data(cfg, seed)
        teacher, tlog = train_teacher(
            cfg, seed, alpha, data,
            checkpoint=ckpt_dir / f"teacher_s{seed:03d}_a{alpha:g}.ckpt" if ckpt_dir else None)
    except LabError as e:
        return [_failed(c, e) for c in cells]
    thash = parameter_hash(teacher)
    for cell in cells:
        cell.teacher_log, cell.teacher_hash = tlog, thash
        try:
            _, cell.student_log = distill_student(teacher, cfg, seed, cell.setting, data)
        except LabError as e:
            _failed(cell, e)
    return cells


def _run_jobs(fn: Callable, jobs: List[tuple], workers: int, desc: str) -> List:
    results = []
    show = sys.stderr.isatty()
    if workers <= 1 or len(jobs) <= 1:
        for args in tqdm(jobs, desc=desc, disable=not show):
            results.append(fn(*args))
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for args in jobs]
        for fut in tqdm(as_completed(futures), total=len(futures), desc=desc, disable=not show):
            results.append(fut.result())
    return results


@dataclass
class MatrixResult:
    cells: List[CellResult]
    summary: dict


def run_matrix(cfg: ExperimentConfig, workers: int = 1, out_dir: Optional[str | Path] = None) -> MatrixResult:
    jobs = [(cfg, seed, alpha, str(out_dir) if out_dir else None)
            for seed in cfg.seeds for alpha in cfg.teacher.alphas]
    cells = [c for batch in _run_jobs(run_job, jobs, workers, "matrix") for c in batch]
    cells.sort(key=lambda c: c.cell_id)
    n_failed = sum(not c.ok for c in cells)
    logger.info("matrix: %d cells, %d failed", len(cells), n_failed)
    return MatrixResult(cells, summarize(cells, cfg))


# ---------- Summaries ----------

def mean_std(values: Sequence[float]) -> Dict[str, Optional[float]]:
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}


def sign_test(wins: int, n: int) -> dict:
    """One-sided binomial test of `wins` successes out of `n` against a fair coin."""
    p = float(binomtest(wins, n, 0.5, alternative="greater").pvalue) if n > 0 else None
    return {"wins": int(wins), "n": int(n), "p_value": p}


def _teacher_metrics(c: CellResult) -> Dict[str, float]:
    t = c.teacher_log
    out = {"teacher_val_top1": t.final_val_top1}
    if t.stability is not None:
        out.update({
            "teacher_stability_eq2": t.stability.stability_eq2,
            "teacher_stability_alg1": t.stability.stability_alg1,
            "teacher_inter_stability": t.stability.inter_stability,
            "teacher_mean_max_prob": float(t.profile.max_entries.mean()),
            "teacher_minor_mass": float(t.profile.minor_mass.mean()),
        })
    if t.geometry is not None:
        out.update({"d_c_full": t.geometry.full.d_c, "spread_full": t.geometry.full.mean_spread,
                    "d_c_plane": t.geometry.plane.d_c})
    return out


def cell_metrics(c: CellResult) -> Dict[str, float]:
    out = _teacher_metrics(c) if c.teacher_log is not None else {}
    if c.student_log is not None:
        out.update({"student_val_top1": c.student_log.final_val_top1,
                    "student_val_topk": c.student_log.final.val_topk if c.student_log.final else float("nan"),
                    "student_train_loss": c.student_log.final_train_loss})
    return out


def _correlations(x: Sequence[float], y: Sequence[float]) -> Optional[dict]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 3 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return {"pearson": float(pearsonr(x, y)[0]), "spearman": float(spearmanr(x, y)[0]), "n": int(x.size)}


def _directional(ok: List[CellResult], ls_alpha: float, setting: str, cfg: ExperimentConfig) -> dict:
    by = {(c.seed, c.alpha): cell_metrics(c) for c in ok if c.setting.label == setting}
    seeds = sorted({s for s, a in by if (s, 0.0) in by and (s, ls_alpha) in by})

    def count(metric: str, ls_wins: Callable[[float, float], bool]) -> dict:
        pairs = [(by[(s, ls_alpha)].get(metric), by[(s, 0.0)].get(metric)) for s in seeds]
        pairs = [(a, b) for a, b in pairs if a is not None and b is not None]
        return sign_test(sum(ls_wins(a, b) for a, b in pairs), len(pairs))

    lower, higher = (lambda a, b: a < b), (lambda a, b: a > b)
    better_teacher = [s for s in seeds
                      if by[(s, ls_alpha)]["teacher_val_top1"] != by[(s, 0.0)]["teacher_val_top1"]]
    wins = 0
    for s in better_teacher:
        ls_teacher_better = by[(s, ls_alpha)]["teacher_val_top1"] > by[(s, 0.0)]["teacher_val_top1"]
        ls_student_better = by[(s, ls_alpha)]["student_val_top1"] > by[(s, 0.0)]["student_val_top1"]
        wins += ls_teacher_better == ls_student_better
    gap = [by[(s, ls_alpha)]["student_val_top1"] - by[(s, 0.0)]["student_val_top1"] for s in seeds]
    mean_gap = float(np.mean(gap)) if gap else None
    return {
        "seeds": len(seeds),
        # stability_eq2 higher <=> intra-class variance lower
        "ls_lower_intra_variance": count("teacher_stability_eq2", higher),
        "ls_lower_max_mean_prob": count("teacher_mean_max_prob", lower),
        "ls_higher_student_train_loss": count("student_train_loss", higher),
        "ls_larger_d_c": count("d_c_full", higher),
        "ls_smaller_spread": count("spread_full", lower),
        "better_teacher_better_student": sign_test(wins, len(better_teacher)),
        "student_top1_gap": mean_gap,
        "student_no_worse": None if mean_gap is None else bool(mean_gap >= -cfg.analysis.ls_tolerance),
    }


def summarize(cells: Sequence[CellResult], cfg: ExperimentConfig) -> dict:
    cells = sorted(cells, key=lambda c: c.cell_id)
    ok = [c for c in cells if c.ok]
    settings_seen = list(dict.fromkeys(s.label for s in cfg.distill))
    groups = []
    for alpha in cfg.teacher.alphas:
        for label in settings_seen:
            members = [c for c in ok if c.alpha == alpha and c.setting.label == label]
            rows = [cell_metrics(c) for c in members]
            keys = sorted({k for r in rows for k in r})
            groups.append({
                "alpha": alpha,
                "setting": label,
                "cells": len(members),
                "metrics": {k: mean_std([r.get(k) for r in rows]) for k in keys},
            })
    directional = {}
    if 0.0 in cfg.teacher.alphas:
        for ls_alpha in (a for a in cfg.teacher.alphas if a > 0.0):
            for label in settings_seen:
                directional[f"alpha{ls_alpha:g}_vs_0/{label}"] = _directional(ok, ls_alpha, label, cfg)
    rows = [cell_metrics(c) for c in ok]
    rows = [r for r in rows if "student_val_top1" in r]
    quality = {
        "teacher_top1_vs_student_top1": _correlations(
            [r["teacher_val_top1"] for r in rows], [r["student_val_top1"] for r in rows]),
        "teacher_stability_vs_student_top1": _correlations(
            [r.get("teacher_stability_eq2", np.nan) for r in rows], [r["student_val_top1"] for r in rows])
        if all("teacher_stability_eq2" in r for r in rows) else None,
    }
    return {
        "name": cfg.name,
        "cells": len(cells),
        "failed": [{"cell_id": c.cell_id, "error_code": c.error_code, "message": c.message}
                   for c in cells if not c.ok],
        "groups": groups,
        "directional": directional,
        "teacher_quality": quality,
        "loss_normalisation": "per-example mean over each epoch",
    }


# ---------- Studies ----------

def _ls_gain(cfg: ExperimentConfig, seed: int, alpha: float, data: Split) -> float:
    accs = []
    for a in (0.0, alpha):
        _, log = train_teacher(cfg, seed, a, data, analyse=False)
        accs.append(log.final_val_top1)
    return accs[1] - accs[0]


def _study_failure(seed: int, err: LabError, **where) -> dict:
    logger.warning("study seed %d failed: %s", seed, err)
    return {"seed": seed, **where, "status": "failed", "error_code": err.code, "message": err.detail}


def longtail_job(cfg: ExperimentConfig, seed: int) -> dict:
    try:
        source = source_dataset(cfg, seed)
        balanced = prepare_data(cfg, seed, long_tail=cfg.study.long_tail.model_copy(update={"balanced": True}),
                                source=source)
        skewed = prepare_data(cfg, seed, long_tail=cfg.study.long_tail, source=source)
        return {"seed": seed, "status": "ok",
                "gain_balanced": _ls_gain(cfg, seed, cfg.study.alpha, balanced),
                "gain_long_tail": _ls_gain(cfg, seed, cfg.study.alpha, skewed)}
    except LabError as e:
        return _study_failure(seed, e)


def class_count_job(cfg: ExperimentConfig, seed: int) -> dict:
    """Gains per class count; a failing count is recorded and the other counts still run."""
    counts = sorted(cfg.study.class_counts)
    try:
        source = source_dataset(cfg, seed, num_classes=None if cfg.data.file else counts[-1])
    except LabError as e:
        return {"seed": seed, "status": "failed", "gains": {}, "failed": [_study_failure(seed, e)]}
    gains, failed = {}, []
    for k in counts:
        try:
            gains[str(k)] = _ls_gain(cfg, seed, cfg.study.alpha, prepare_data(cfg, seed, curate=k, source=source))
        except LabError as e:
            failed.append(_study_failure(seed, e, num_classes=k))
    return {"seed": seed, "status": "failed" if failed else "ok", "gains": gains, "failed": failed}


def run_longtail_study(cfg: ExperimentConfig, workers: int = 1) -> dict:
    rows = sorted(_run_jobs(longtail_job, [(cfg, s) for s in cfg.seeds], workers, "long-tail"),
                  key=lambda r: r["seed"])
    ok = [r for r in rows if r["status"] == "ok"]
    wins = sum(r["gain_long_tail"] < r["gain_balanced"] for r in ok)
    return {
        "kind": "long-tail",
        "alpha": cfg.study.alpha,
        "per_seed": rows,
        "failed": [r for r in rows if r["status"] != "ok"],
        "gain_balanced": mean_std([r["gain_balanced"] for r in ok]),
        "gain_long_tail": mean_std([r["gain_long_tail"] for r in ok]),
        "smaller_gain_on_long_tail": sign_test(wins, len(ok)),
    }


def run_class_count_study(cfg: ExperimentConfig, workers: int = 1) -> dict:
    counts = sorted(cfg.study.class_counts)
    rows = sorted(_run_jobs(class_count_job, [(cfg, s) for s in cfg.seeds], workers, "num-classes"),
                  key=lambda r: r["seed"])
    per_k = {str(k): mean_std([r["gains"].get(str(k)) for r in rows]) for k in counts}
    lo, hi = str(counts[0]), str(counts[-1])
    paired = [r for r in rows if lo in r["gains"] and hi in r["gains"]]
    wins = sum(r["gains"][lo] > r["gains"][hi] for r in paired)
    decreases = None
    if per_k[lo]["mean"] is not None and per_k[hi]["mean"] is not None:
        decreases = bool(per_k[lo]["mean"] > per_k[hi]["mean"])
    return {
        "kind": "num-classes",
        "alpha": cfg.study.alpha,
        "class_counts": counts,
        "per_seed": rows,
        "failed": [f for r in rows for f in r["failed"]],
        "gain": per_k,
        "gain_decreases_with_classes": decreases,
        "fewer_classes_larger_gain": sign_test(wins, len(paired)),
    }
