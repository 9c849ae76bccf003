# exporters.py
from __future__ import annotations
import csv
import hashlib
import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from docx import Document
from docx.shared import Pt

from config import settings

NON_DETERMINISTIC = {"timings.json", "ledger.sqlite", "report.docx"}


def _fmt(v: float) -> str:
    return f"{v:.{settings.csv_decimals}f}"


# ---------- CSV ----------

def write_epoch_csv(path: Path, entries: Iterable) -> Path:
    """`epoch,train_loss,val_top1,val_topk` from EpochEntry-like rows."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_top1", "val_topk"])
        for e in entries:
            w.writerow([e.epoch, _fmt(e.train_loss), _fmt(e.val_top1), _fmt(e.val_topk)])
    return path


def write_curve_csv(path: Path, alpha: float, points: Sequence[Tuple[float, float]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["alpha", "z", "loss"])
        for z, loss in points:
            w.writerow([_fmt(alpha), _fmt(z), _fmt(loss)])
    return path


def write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")
    return path


# ---------- Manifest ----------

def canonical_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, subcommand: str, resolved_config: Optional[dict],
                   extra: Optional[dict] = None) -> Path:
    """Lists every file under out_dir with its SHA-256; timings and the ledger are flagged non-deterministic."""
    files: List[Dict] = []
    for p in sorted(out_dir.rglob("*")):
        if not p.is_file() or p.name == "manifest.json":
            continue
        rel = p.relative_to(out_dir).as_posix()
        files.append({
            "path": rel,
            "sha256": file_hash(p),
            "deterministic": p.name not in NON_DETERMINISTIC,
        })
    manifest = {
        "subcommand": subcommand,
        "config": resolved_config,
        "config_hash": canonical_hash(resolved_config) if resolved_config is not None else None,
        "files": files,
        **(extra or {}),
    }
    return write_json(out_dir / "manifest.json", manifest)


# ---------- Reports ----------

def _cell(stat: Optional[dict]) -> str:
    if not stat or stat.get("mean") is None:
        return "-"
    return f"{stat['mean']:.4f} ± {stat['std']:.4f}"


REPORT_COLUMNS = [
    ("teacher top-1", "teacher_val_top1"),
    ("student top-1", "student_val_top1"),
    ("student loss", "student_train_loss"),
    ("S eq2", "teacher_stability_eq2"),
    ("S alg1", "teacher_stability_alg1"),
    ("S inter", "teacher_inter_stability"),
    ("max p̄", "teacher_mean_max_prob"),
    ("D_c", "d_c_full"),
]


def _sign_line(name: str, t) -> str:
    if not isinstance(t, dict) or "wins" not in t:
        return f"{name}: {t}"
    p = "-" if t["p_value"] is None else f"{t['p_value']:.4f}"
    return f"{name}: {t['wins']}/{t['n']} (p={p})"


def summary_lines(summary: dict) -> List[str]:
    lines = [f"experiment: {summary.get('name')}", f"cells: {summary.get('cells')}",
             f"failed: {len(summary.get('failed', []))}",
             f"loss normalisation: {summary.get('loss_normalisation')}", ""]
    for g in summary.get("groups", []):
        lines.append(f"alpha={g['alpha']:g} {g['setting']} (n={g['cells']})")
        for title, key in REPORT_COLUMNS:
            lines.append(f"  {title}: {_cell(g['metrics'].get(key))}")
    for name, block in summary.get("directional", {}).items():
        lines.append("")
        lines.append(f"[{name}] seeds={block['seeds']}")
        for k, v in block.items():
            if k != "seeds":
                lines.append("  " + _sign_line(k, v))
    quality = summary.get("teacher_quality") or {}
    if quality:
        lines.append("")
        lines.append("teacher quality")
        for k, v in quality.items():
            lines.append(f"  {k}: " + ("-" if v is None else
                                       f"pearson={v['pearson']:.3f} spearman={v['spearman']:.3f} n={v['n']}"))
    for f in summary.get("failed", []):
        lines.append(f"FAILED {f['cell_id']}: {f['error_code']} {f['message']}")
    return lines


def write_summary_txt(path: Path, summary: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(summary_lines(summary)) + "\n", encoding="utf-8")
    return path


def summary_to_docx(summary: dict, out_path: Path) -> Path:
    doc = Document()
    style = doc.styles['Normal']
    style.font.name = 'Calibri'
    style.font.size = Pt(10)

    doc.add_heading(f"Experiment {summary.get('name')}", level=1)
    doc.add_paragraph(f"{summary.get('cells')} cells, {len(summary.get('failed', []))} failed. "
                      f"Losses are {summary.get('loss_normalisation')}.")

    doc.add_heading("Per-setting means", level=2)
    table = doc.add_table(rows=1, cols=2 + len(REPORT_COLUMNS))
    head = table.rows[0].cells
    head[0].text, head[1].text = "alpha", "setting"
    for i, (title, _) in enumerate(REPORT_COLUMNS):
        head[2 + i].text = title
    for g in summary.get("groups", []):
        row = table.add_row().cells
        row[0].text, row[1].text = f"{g['alpha']:g}", g["setting"]
        for i, (_, key) in enumerate(REPORT_COLUMNS):
            row[2 + i].text = _cell(g["metrics"].get(key))

    doc.add_heading("Directional sign tests", level=2)
    for name, block in summary.get("directional", {}).items():
        doc.add_heading(name, level=3)
        for k, v in block.items():
            if k != "seeds":
                doc.add_paragraph(_sign_line(k, v), style="List Bullet")

    failed = summary.get("failed", [])
    if failed:
        doc.add_heading("Failed cells", level=2)
        for f in failed:
            doc.add_paragraph(f"{f['cell_id']}: {f['error_code']} {f['message']}")

    out_path.parent.mkdir(parents=True, exist_ok=True)
    doc.save(out_path)
    return out_path
