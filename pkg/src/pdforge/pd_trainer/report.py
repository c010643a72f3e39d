"""Run reports: per-eval CSV trace plus a JSON summary with the config echo."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import CorruptionError, StorageError

CSV_COLUMNS = ("step", "train_loss", "held_out_ce", "perplexity", "alpha", "lr")
REPORT_CSV = "report.csv"
REPORT_JSON = "report.json"


@dataclass
class EvalRecord:
    step: int
    train_loss: float
    held_out_ce: float
    perplexity: float
    alpha: float
    lr: float


@dataclass
class RunReport:
    records: list[EvalRecord] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    config_hash: str = ""

    @property
    def final(self) -> EvalRecord:
        return self.records[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.records:
            # repr gives the shortest string that parses back to the same float
            writer.writerow([r.step] + [repr(float(getattr(r, c))) for c in CSV_COLUMNS[1:]])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "config": self.config,
            "config_hash": self.config_hash,
            "records": [asdict(r) for r in self.records],
            "summary": self.summary,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, run_dir: str | Path) -> None:
        d = Path(run_dir)
        try:
            d.mkdir(parents=True, exist_ok=True)
            (d / REPORT_CSV).write_text(self.to_csv())
            (d / REPORT_JSON).write_text(self.to_json())
        except OSError as exc:
            raise StorageError(f"cannot write report into {d}: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        doc = json.loads(text)
        return cls(
            [EvalRecord(**r) for r in doc["records"]],
            doc.get("summary", {}),
            doc.get("config", {}),
            doc.get("config_hash", ""),
        )

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunReport":
        path = Path(run_dir) / REPORT_JSON
        try:
            return cls.from_json(path.read_text())
        except OSError as exc:
            raise StorageError(f"cannot read report {path}: {exc}") from exc
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorruptionError(f"report {path} is malformed: {exc}") from exc


def parse_csv(text: str) -> list[EvalRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise CorruptionError("report CSV has an unexpected header")
    return [EvalRecord(int(r[0]), *(float(x) for x in r[1:])) for r in rows[1:]]


def make_record(step: int, train_loss: float, held_out_ce: float, alpha: float, lr: float) -> EvalRecord:
    return EvalRecord(step, float(train_loss), float(held_out_ce), math.exp(held_out_ce), float(alpha), float(lr))


COMPARE_COLUMNS = ("run", "final_step", "final_ce", "perplexity", "delta_pct")


def compare(reports: dict[str, RunReport], baseline: str) -> list[dict]:
    """Final CE per run and relative improvement ``(base_ce - ce) / base_ce`` in percent."""
    if baseline not in reports:
        raise KeyError(f"baseline run {baseline!r} not among the reports")
    base_ce = reports[baseline].final.held_out_ce
    rows = []
    for name, rep in reports.items():
        ce = rep.final.held_out_ce
        rows.append(
            {
                "run": name,
                "final_step": rep.final.step,
                "final_ce": ce,
                "perplexity": rep.final.perplexity,
                "delta_pct": 100.0 * (base_ce - ce) / base_ce,
            }
        )
    return rows


def comparison_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARE_COLUMNS)
    for row in rows:
        writer.writerow(
            [row["run"], row["final_step"]] + [repr(float(row[c])) for c in COMPARE_COLUMNS[2:]]
        )
    return buf.getvalue()


def parse_comparison_csv(text: str) -> list[dict]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != COMPARE_COLUMNS:
        raise CorruptionError("comparison CSV has an unexpected header")
    return [
        {"run": r[0], "final_step": int(r[1]), **{c: float(x) for c, x in zip(COMPARE_COLUMNS[2:], r[2:])}}
        for r in rows[1:]
    ]
