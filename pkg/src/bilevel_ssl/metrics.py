"""Per-iteration metrics records and their CSV stream."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

COHORT_COLUMNS = ("U", "W", "S", "O")


@dataclass
class MetricsRecord:
    phase: str
    epoch: int
    iteration: int
    train_loss: float
    val_loss: float
    accuracy: float = math.nan
    lambda_U: float = math.nan
    lambda_W: float = math.nan
    lambda_S: float = math.nan
    lambda_O: float = math.nan
    hvp_norm: float = math.nan
    reg_norm: float = math.nan
    ent_norm: float = math.nan
    od_norm: float = math.nan
    epsilon: float = math.nan
    xi: float = math.nan
    meta_skipped: int = 0


COLUMNS = tuple(f.name for f in fields(MetricsRecord))


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _parse(name: str, text: str):
    if name == "phase":
        return text
    if name in ("epoch", "iteration", "meta_skipped"):
        return int(text)
    return math.nan if text == "" else float(text)


class MetricsWriter:
    """Append-only CSV sink; rows are buffered and flushed on demand."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self.rows: list[MetricsRecord] = []
        self._pending: list[MetricsRecord] = []
        self._last: tuple[int, int] | None = None
        if not append or not self.path.exists():
            self.path.write_text(",".join(COLUMNS) + "\n")
        else:
            existing = read_metrics(self.path)
            if existing:
                self._last = (existing[-1].epoch, existing[-1].iteration)

    def append(self, rec: MetricsRecord) -> None:
        key = (rec.epoch, rec.iteration)
        if self._last is not None and key <= self._last:
            raise ValueError(f"metrics keys must increase: {key} after {self._last}")
        self._last = key
        self.rows.append(rec)
        self._pending.append(rec)

    def flush(self) -> None:
        if not self._pending:
            return
        with open(self.path, "a", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            for rec in self._pending:
                out.writerow([_fmt(v) for v in asdict(rec).values()])
        self._pending.clear()


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"{path}: unexpected metrics columns {reader.fieldnames}")
        return [MetricsRecord(**{k: _parse(k, row[k]) for k in COLUMNS}) for row in reader]
