# ledger.py
from __future__ import annotations
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple
from uuid import uuid4

from sqlalchemy import (
    Column, DateTime, Float, Integer, MetaData, String, Table, Text, UniqueConstraint,
    create_engine, func, select,
)
from sqlalchemy.exc import IntegrityError

from errors import LedgerError

# ---------- Data models ----------

@dataclass
class CellRow:
    cell_id: str
    seed: int
    alpha: float
    setting: str          # distill label
    status: str           # "ok" | "failed"
    error_code: Optional[str] = None
    message: Optional[str] = None


@dataclass
class EpochRow:
    cell_id: str
    role: str             # "teacher" | "student"
    epoch: int
    train_loss: float
    val_top1: float
    val_topk: float

# ---------- Schema ----------

metadata = MetaData()

cells_table = Table(
    "cells", metadata,
    Column("id", Integer, primary_key=True, autoincrement=True),
    Column("run_id", String(36), nullable=False, index=True),
    Column("cell_id", String(200), nullable=False),
    Column("seed", Integer, nullable=False),
    Column("alpha", Float, nullable=False),
    Column("setting", String(100), nullable=False),
    Column("status", String(20), nullable=False),
    Column("error_code", String(50)),
    Column("message", Text),
    Column("created_at", DateTime, nullable=False),
    UniqueConstraint("run_id", "cell_id", name="uq_cell_once"),
)

epochs_table = Table(
    "epochs", metadata,
    Column("id", Integer, primary_key=True, autoincrement=True),
    Column("run_id", String(36), nullable=False, index=True),
    Column("cell_id", String(200), nullable=False),
    Column("role", String(20), nullable=False),
    Column("epoch", Integer, nullable=False),
    Column("train_loss", Float, nullable=False),
    Column("val_top1", Float, nullable=False),
    Column("val_topk", Float, nullable=False),
    UniqueConstraint("run_id", "cell_id", "role", "epoch", name="uq_epoch_once"),
)

LEDGER_FILENAME = "ledger.sqlite"


def new_run_id() -> str:
    return str(uuid4())


class RunLedger:
    """Append-only record of matrix cells and their epoch rows, one run_id per invocation.

    Rows are never updated; recording the same cell or epoch twice in a run is a ledger-error.
    """

    def __init__(self, path: str | Path, run_id: Optional[str] = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id or new_run_id()
        self.engine = create_engine(f"sqlite:///{self.path}")
        metadata.create_all(self.engine)

    @classmethod
    def in_dir(cls, out_dir: str | Path, run_id: Optional[str] = None) -> "RunLedger":
        return cls(Path(out_dir) / LEDGER_FILENAME, run_id)

    def record_cell(self, row: CellRow) -> None:
        payload = {**asdict(row), "run_id": self.run_id, "created_at": datetime.now(timezone.utc)}
        self._insert(cells_table, [payload], f"cell {row.cell_id}")

    def record_epochs(self, rows: Iterable[EpochRow]) -> int:
        payload = [{**asdict(r), "run_id": self.run_id} for r in rows]
        if not payload:
            return 0
        self._insert(epochs_table, payload, f"epochs of {payload[0]['cell_id']}")
        return len(payload)

    def _insert(self, table: Table, payload: List[dict], what: str) -> None:
        try:
            with self.engine.begin() as conn:
                conn.execute(table.insert(), payload)
        except IntegrityError as e:
            raise LedgerError(f"{what} already recorded in run {self.run_id}") from e

    def cell_rows(self) -> List[dict]:
        stmt = (select(cells_table).where(cells_table.c.run_id == self.run_id)
                .order_by(cells_table.c.cell_id))
        with self.engine.connect() as conn:
            return [dict(r) for r in conn.execute(stmt).mappings().all()]

    def epoch_counts(self) -> Dict[Tuple[str, str], int]:
        """(cell_id, role) -> number of epoch rows in this run."""
        t = epochs_table
        stmt = (select(t.c.cell_id, t.c.role, func.count())
                .where(t.c.run_id == self.run_id)
                .group_by(t.c.cell_id, t.c.role))
        with self.engine.connect() as conn:
            return {(cid, role): n for cid, role, n in conn.execute(stmt)}

    def close(self) -> None:
        self.engine.dispose()
