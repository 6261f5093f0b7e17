"""Metric-answer scoring for spatial QA.

A free-text answer is reduced to a quantity by taking the FIRST numeric
literal and the nearest recognizable length unit that follows it within the
same clause (clauses end at ``, ; : . ! ?``). Both sides are converted to
meters and the prediction counts as correct when it lies within
[0.75, 1.25] x ground truth, bounds inclusive. Answers that fail to parse
are conservatively scored incorrect rather than excluded.

Unit lexicon (synonyms in parentheses): millimeter (mm, millimetre/s),
centimeter (cm, centimetre/s), meter (m, metre/s), kilometer (km,
kilometre/s), inch (in, inches, "), foot (ft, feet, '), yard (yd, yards).
The unit must follow the number; a leading unit ("cm: 45") is not
recognized.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

from .errors import DataError

UNIT_FACTORS = {
    "millimeter": 0.001,
    "centimeter": 0.01,
    "meter": 1.0,
    "kilometer": 1000.0,
    "inch": 0.0254,
    "foot": 0.3048,
    "yard": 0.9144,
}

_WORD_SYNONYMS = {
    "millimeter": "millimeter", "millimeters": "millimeter",
    "millimetre": "millimeter", "millimetres": "millimeter", "mm": "millimeter",
    "centimeter": "centimeter", "centimeters": "centimeter",
    "centimetre": "centimeter", "centimetres": "centimeter", "cm": "centimeter",
    "meter": "meter", "meters": "meter", "metre": "meter", "metres": "meter",
    "m": "meter",
    "kilometer": "kilometer", "kilometers": "kilometer",
    "kilometre": "kilometer", "kilometres": "kilometer", "km": "kilometer",
    "inch": "inch", "inches": "inch", "in": "inch",
    "foot": "foot", "feet": "foot", "ft": "foot",
    "yard": "yard", "yards": "yard", "yd": "yard", "yds": "yard",
}

_NUMBER_RE = re.compile(r"[-+]?(?:\d+(?:\.\d+)?|\.\d+)")
_CLAUSE_END_RE = re.compile(r"[,;:.!?]")
_UNIT_WORD_RE = re.compile(r"[A-Za-z]+|[\"']")

CATEGORIES = ("height", "width", "vertical-distance", "horizontal-distance",
              "direct-distance")


@dataclass(frozen=True)
class Quantity:
    """A parsed numeric value with a canonical length unit."""

    value: float
    unit: str

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise DataError("quantity value must be finite")
        if self.unit not in UNIT_FACTORS:
            raise DataError(f"unknown unit {self.unit!r}")


def parse_quantity(answer: str) -> Quantity | None:
    """First number plus the nearest following unit token, or None."""
    match = _NUMBER_RE.search(answer)
    if match is None:
        return None
    rest = answer[match.end():]
    clause_end = _CLAUSE_END_RE.search(rest)
    if clause_end is not None:
        rest = rest[: clause_end.start()]
    for token in _UNIT_WORD_RE.finditer(rest):
        word = token.group(0)
        canonical = _WORD_SYNONYMS.get(word.lower())
        if canonical is None and word == '"':
            canonical = "inch"
        elif canonical is None and word == "'":
            canonical = "foot"
        if canonical is not None:
            return Quantity(float(match.group(0)), canonical)
    return None


def to_meters(q: Quantity) -> float:
    return q.value * UNIT_FACTORS[q.unit]


def score(pred_m: float, gt_m: float) -> bool:
    """Inclusive tolerance band: 0.75 * gt <= pred <= 1.25 * gt."""
    if not math.isfinite(gt_m) or gt_m <= 0:
        raise DataError("ground truth must be a positive finite number of meters")
    return 0.75 * gt_m <= pred_m <= 1.25 * gt_m


@dataclass
class EvalRecord:
    """One scored question; ``correct`` is set only after scoring runs."""

    id: str
    category: str
    gt: Quantity
    answer: str
    parsed: Quantity | None = None
    correct: bool | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise DataError(f"unknown category {self.category!r} (record {self.id})")


def score_record(rec: EvalRecord) -> EvalRecord:
    rec.parsed = parse_quantity(rec.answer)
    if rec.parsed is None:
        rec.correct = False
    else:
        rec.correct = score(to_meters(rec.parsed), to_meters(rec.gt))
    return rec


@dataclass
class Report:
    """Per-category and overall accuracy in percent, plus parse failures."""

    per_category: dict[str, dict] = field(default_factory=dict)
    average_accuracy: float = 0.0
    parse_failures: int = 0
    total: int = 0

    def to_json(self) -> dict:
        return {"categories": self.per_category,
                "average_accuracy": self.average_accuracy,
                "parse_failures": self.parse_failures,
                "total": self.total}


def aggregate(records: list[EvalRecord]) -> Report:
    """Fold scored records into a report.

    Per-category accuracy is correct/total within the category; the average
    is overall accuracy across all records (parse failures count as wrong).
    Categories appear in canonical order; empty categories are omitted.
    """
    if not records:
        raise DataError("cannot aggregate an empty record list")
    counts = {c: [0, 0] for c in CATEGORIES}
    failures = 0
    correct_total = 0
    for rec in records:
        if rec.correct is None:
            rec = score_record(rec)
        if rec.parsed is None:
            failures += 1
        counts[rec.category][0] += 1
        if rec.correct:
            counts[rec.category][1] += 1
            correct_total += 1
    per_category = {}
    for cat in CATEGORIES:
        total, good = counts[cat]
        if total == 0:
            continue
        per_category[cat] = {"total": total, "correct": good,
                             "accuracy": 100.0 * good / total}
    report = Report(per_category=per_category,
                    average_accuracy=100.0 * correct_total / len(records),
                    parse_failures=failures,
                    total=len(records))
    return report


# -- file plumbing ------------------------------------------------------------


def eval_records_from_jsonl(dataset_path, answers: dict[str, str] | None = None
                            ) -> list[EvalRecord]:
    """Build scoreable records from a dataset JSONL.

    ``answers`` maps record id -> generated answer text; when omitted, the
    dataset's own ground-truth answers are used (self-scoring / oracle mode).
    A missing answer is recorded as empty text, which scores as a parse
    failure.
    """
    records: list[EvalRecord] = []
    with open(dataset_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                gt = Quantity(float(doc["gt_value"]), doc.get("gt_unit", "meter"))
                answer = doc["answer"] if answers is None else answers.get(str(doc["id"]), "")
                records.append(EvalRecord(id=str(doc["id"]), category=doc["category"],
                                          gt=gt, answer=answer))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, DataError) as exc:
                raise DataError(f"line {line_no}: {exc}") from exc
    return records


def report_csv_rows(report: Report) -> list[tuple]:
    rows = [("category", "total", "correct", "accuracy")]
    for cat, entry in report.per_category.items():
        rows.append((cat, entry["total"], entry["correct"], f"{entry['accuracy']:.4f}"))
    rows.append(("average", report.total,
                 round(report.average_accuracy * report.total / 100),
                 f"{report.average_accuracy:.4f}"))
    return rows


def plot_csv_rows(report: Report) -> list[tuple]:
    rows = [("category", "accuracy")]
    for cat, entry in report.per_category.items():
        rows.append((cat, f"{entry['accuracy']:.4f}"))
    rows.append(("average", f"{report.average_accuracy:.4f}"))
    return rows
