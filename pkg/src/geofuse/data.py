"""Dataset tooling: synthetic spatial-QA scenes, bounding-box normalization,
seeded subsampling, and JSONL validation.

Synthetic scenes
----------------
A scene is (glyph id, metric scalar). The two channels are strictly
separated so the encoder stubs can demonstrate the ambiguity/fusion story:

* the *semantic channel* (image channels R, G) carries a fixed texture per
  glyph id -- pure object identity, no metric content;
* the *geometry channel* (image channel B) carries a soft vertical ridge
  whose horizontal position encodes the metric scalar on a log scale,
  blended with a faint texture shared by the glyph's *group* (``glyph % 5``).

The ground-truth answer is a function of the metric scalar alone, snapped to
a fixed log-spaced grid whose step (x1.2) sits inside the scoring band, so
an off-by-one-bin prediction still scores correct. One glyph class renders
its ridge with a fixed calibration offset of three grid steps; because that
glyph shares its depth-texture group with an ordinary glyph, the offset
cannot be detected from the geometry channel alone -- resolving it requires
the appearance channels. Questions deliberately never name the object, so
object identity is only observable in the image.

JSONL schema (one record per line)::

    {"id": str, "category": one of five category names,
     "question": str, "answer": str,
     "gt_value": positive float, "gt_unit": "meter",
     "scene": {"glyph": int in [0, 10), "geom": float in [GEOM_MIN, GEOM_MAX]},
     "bboxes": [[x, y, w, h], ...]}   # relative corner boxes, optional

Inline scene specs make every dataset fully reproducible without binary
assets; images are re-rendered on demand.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .lm import SPECIALS, Vocab
from .util import rng_for

CATEGORIES = ("height", "width", "vertical-distance", "horizontal-distance",
              "direct-distance")

# Metric answer grid: 13 log-spaced values, ratio 1.2, displayed at 2 dp.
GRID_RATIO = 1.2
GEOM_MIN = 0.5
N_GRID = 13
GEOM_MAX = GEOM_MIN * GRID_RATIO ** (N_GRID - 1)
METRIC_GRID = tuple(round(GEOM_MIN * GRID_RATIO**i, 2) for i in range(N_GRID))

N_GLYPHS = 10
#: Glyph whose geometry ridge is rendered with a fixed calibration offset.
CALIBRATED_GLYPH = 9
CALIBRATION_STEPS = 3
CALIBRATION_FACTOR = GRID_RATIO**CALIBRATION_STEPS
#: Depth-texture group; the calibrated glyph collides with glyph 4 here.
N_GROUPS = 5

_RIDGE_SIGMA = 0.06
_RIDGE_MARGIN = 0.08
_IMPRINT_BLEND = 0.45
_APPARENT_MAX = GEOM_MAX * CALIBRATION_FACTOR

_GLYPH_SEED = 9021
_GROUP_SEED = 4407

_QUESTIONS = {
    "height": "how tall is the marked object ?",
    "width": "how wide is the marked object ?",
    "vertical-distance": "what is the vertical distance to the marked object ?",
    "horizontal-distance": "what is the horizontal distance to the marked object ?",
    "direct-distance": "what is the direct distance to the marked object ?",
}


@dataclass(frozen=True)
class SyntheticScene:
    """Object identity plus the metric scalar driving the geometry cue."""

    glyph: int
    geom: float

    def __post_init__(self):
        if not (0 <= self.glyph < N_GLYPHS):
            raise DataError(f"glyph id {self.glyph} out of range [0, {N_GLYPHS})")
        if not (GEOM_MIN <= self.geom <= GEOM_MAX * 1.0000001):
            raise DataError(f"geom {self.geom} outside [{GEOM_MIN}, {GEOM_MAX}]")


@dataclass
class VQARecord:
    """One instruction sample; ``scene`` keeps it reproducible inline."""

    id: str
    category: str
    question: str
    answer: str
    gt_value: float
    gt_unit: str = "meter"
    scene: SyntheticScene | None = None
    bboxes: list[list[float]] = field(default_factory=list)

    def to_json(self) -> dict:
        doc = {"id": self.id, "category": self.category, "question": self.question,
               "answer": self.answer, "gt_value": self.gt_value, "gt_unit": self.gt_unit}
        if self.scene is not None:
            doc["scene"] = {"glyph": self.scene.glyph, "geom": self.scene.geom}
        if self.bboxes:
            doc["bboxes"] = self.bboxes
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "VQARecord":
        scene = None
        if "scene" in doc:
            scene = SyntheticScene(int(doc["scene"]["glyph"]), float(doc["scene"]["geom"]))
        return cls(id=str(doc["id"]), category=doc["category"], question=doc["question"],
                   answer=doc["answer"], gt_value=float(doc["gt_value"]),
                   gt_unit=doc.get("gt_unit", "meter"), scene=scene,
                   bboxes=[list(map(float, b)) for b in doc.get("bboxes", [])])


# -- rendering ---------------------------------------------------------------


def _glyph_texture(glyph: int, side: int) -> np.ndarray:
    cells = rng_for(_GLYPH_SEED, glyph).random((2, 4, 4))
    rep = side // 4
    return np.kron(cells, np.ones((rep, rep)))


def _group_texture(glyph: int, side: int) -> np.ndarray:
    cells = rng_for(_GROUP_SEED, glyph % N_GROUPS).random((4, 4))
    rep = side // 4
    return np.kron(cells, np.ones((rep, rep)))


def ridge_position(scene: SyntheticScene) -> float:
    """Horizontal ridge center in [0, 1] for a scene's apparent distance."""
    apparent = scene.geom * (CALIBRATION_FACTOR if scene.glyph == CALIBRATED_GLYPH else 1.0)
    u = math.log(apparent / GEOM_MIN) / math.log(_APPARENT_MAX / GEOM_MIN)
    return _RIDGE_MARGIN + (1.0 - 2.0 * _RIDGE_MARGIN) * u


def render_scene(scene: SyntheticScene, side: int = 32) -> np.ndarray:
    """Render a scene to an RGB image in [0, 1]."""
    if side % 4 != 0:
        raise DataError("render side must be a multiple of 4")
    img = np.zeros((side, side, 3))
    tex = _glyph_texture(scene.glyph, side)
    img[:, :, 0] = tex[0]
    img[:, :, 1] = tex[1]
    cols = (np.arange(side) + 0.5) / side
    ridge = np.exp(-((cols - ridge_position(scene)) ** 2) / (2.0 * _RIDGE_SIGMA**2))
    img[:, :, 2] = (1.0 - _IMPRINT_BLEND) * ridge[None, :] + \
        _IMPRINT_BLEND * _group_texture(scene.glyph, side)
    return img


def ridge_bbox(scene: SyntheticScene) -> list[float]:
    """Relative box around the geometry ridge (full-height strip)."""
    pos = ridge_position(scene)
    x = max(0.0, pos - 2.0 * _RIDGE_SIGMA)
    w = min(1.0, pos + 2.0 * _RIDGE_SIGMA) - x
    return [round(x, 6), 0.0, round(w, 6), 1.0]


# -- answers and vocabulary ---------------------------------------------------


def snap_to_grid(geom: float) -> float:
    """Nearest metric-grid value (log-space rounding)."""
    if geom <= 0:
        raise DataError("metric value must be positive")
    i = int(round(math.log(geom / GEOM_MIN) / math.log(GRID_RATIO)))
    return METRIC_GRID[min(max(i, 0), N_GRID - 1)]


def answer_text(value: float) -> str:
    return f"{value:.2f} meters"


def question_for(category: str) -> str:
    if category not in _QUESTIONS:
        raise DataError(f"unknown category: {category}")
    return _QUESTIONS[category]


def task_vocab() -> Vocab:
    """Fixed vocabulary for the synthetic task: specials, question words,
    bare digits, metric-grid literals, and length-unit words."""
    words: list[str] = list(SPECIALS)
    seen = set(words)
    for q in _QUESTIONS.values():
        for w in q.split():
            if w not in seen:
                seen.add(w)
                words.append(w)
    for d in "0123456789.":
        words.append(d)
        seen.add(d)
    for v in METRIC_GRID:
        words.append(f"{v:.2f}")
    for u in ("meters", "m", "cm", "centimeters"):
        words.append(u)
    return Vocab(words)


# -- generation ---------------------------------------------------------------


def make_record(scene: SyntheticScene, category: str, record_id: str) -> VQARecord:
    """Record whose answer is a pure function of the scene's metric scalar."""
    value = snap_to_grid(scene.geom)
    return VQARecord(id=record_id, category=category, question=question_for(category),
                     answer=answer_text(value), gt_value=value, gt_unit="meter",
                     scene=scene, bboxes=[ridge_bbox(scene)])


def sample_scene(rng: np.random.Generator) -> SyntheticScene:
    glyph = int(rng.integers(0, N_GLYPHS))
    geom = float(np.exp(rng.uniform(np.log(GEOM_MIN), np.log(GEOM_MAX))))
    return SyntheticScene(glyph, geom)


def generate_synth_dataset(count: int, seed: int, side: int = 32
                           ) -> list[tuple[np.ndarray, VQARecord]]:
    """Seed-deterministic scenes with independently randomized identity and
    metric scalar; every answer is scorable by the metric-answer harness."""
    rng = rng_for(seed, "synth-dataset")
    out = []
    for i in range(count):
        scene = sample_scene(rng)
        category = CATEGORIES[int(rng.integers(0, len(CATEGORIES)))]
        rec = make_record(scene, category, f"synth-{seed}-{i:06d}")
        out.append((render_scene(scene, side), rec))
    return out


def matched_pairs(count: int, seed: int, side: int = 32
                  ) -> list[tuple[np.ndarray, np.ndarray, VQARecord, VQARecord]]:
    """Pairs sharing the semantic channel (same glyph) but differing in the
    geometry channel -- the ambiguity witnesses used by diagnostics."""
    rng = rng_for(seed, "matched-pairs")
    out = []
    for i in range(count):
        glyph = int(rng.integers(0, N_GLYPHS))
        g1 = float(np.exp(rng.uniform(np.log(GEOM_MIN), np.log(GEOM_MAX))))
        g2 = float(np.exp(rng.uniform(np.log(GEOM_MIN), np.log(GEOM_MAX))))
        s1, s2 = SyntheticScene(glyph, g1), SyntheticScene(glyph, g2)
        cat = CATEGORIES[i % len(CATEGORIES)]
        r1 = make_record(s1, cat, f"pair-{seed}-{i:04d}-a")
        r2 = make_record(s2, cat, f"pair-{seed}-{i:04d}-b")
        out.append((render_scene(s1, side), render_scene(s2, side), r1, r2))
    return out


# -- bounding boxes ------------------------------------------------------------


@dataclass(frozen=True)
class BBox:
    """Absolute-pixel box inside a W x H image."""

    x: float
    y: float
    w: float
    h: float
    img_w: float
    img_h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DataError("box width/height must be positive")
        if self.x < 0 or self.y < 0 or self.x + self.w > self.img_w or self.y + self.h > self.img_h:
            raise DataError("box exceeds image bounds")


@dataclass(frozen=True)
class RelBBox:
    """Corner-normalized box with every field in [0, 1]."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        eps = 1e-9
        vals = (self.x, self.y, self.w, self.h)
        if any(v < -eps or v > 1 + eps for v in vals):
            raise DataError("relative box fields must lie in [0, 1]")
        if self.x + self.w > 1 + eps or self.y + self.h > 1 + eps:
            raise DataError("relative box exceeds the unit square")


def rescale_bbox(box: BBox, record_id: str | None = None) -> RelBBox:
    """Absolute pixels -> relative corner coordinates."""
    try:
        return RelBBox(box.x / box.img_w, box.y / box.img_h,
                       box.w / box.img_w, box.h / box.img_h)
    except DataError as exc:
        suffix = f" (record {record_id})" if record_id else ""
        raise DataError(f"{exc}{suffix}") from exc


def unrescale_bbox(rel: RelBBox, img_w: float, img_h: float) -> BBox:
    """Inverse of :func:`rescale_bbox` at given image dimensions."""
    return BBox(rel.x * img_w, rel.y * img_h, rel.w * img_w, rel.h * img_h, img_w, img_h)


# -- subsampling ----------------------------------------------------------------


def subsample(records: list, k: int, seed: int) -> list:
    """Uniform sample of k records without replacement, preserving input order."""
    if k < 0 or k > len(records):
        raise ValueError(f"cannot sample {k} of {len(records)} records")
    idx = rng_for(seed, "subsample").choice(len(records), size=k, replace=False)
    return [records[i] for i in sorted(idx)]


# -- JSONL I/O and validation ------------------------------------------------------


def write_jsonl(records: list[VQARecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_jsonl(path) -> list[VQARecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(VQARecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, DataError) as exc:
                raise DataError(f"line {line_no}: {exc}") from exc
    return records


@dataclass(frozen=True)
class Violation:
    line: int
    record_id: str
    field: str
    message: str


def validate_jsonl(path) -> list[Violation]:
    """Per-line schema and invariant check; empty list means a clean file."""
    path = Path(path)
    if not path.exists():
        raise OSError(f"no such file: {path}")
    violations: list[Violation] = []

    def bad(line, rid, fld, msg):
        violations.append(Violation(line, rid, fld, msg))

    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                bad(line_no, "?", "json", str(exc))
                continue
            rid = str(doc.get("id", "?"))
            for fld in ("id", "category", "question", "answer", "gt_value"):
                if fld not in doc:
                    bad(line_no, rid, fld, "missing required field")
            if "category" in doc and doc["category"] not in CATEGORIES:
                bad(line_no, rid, "category", f"unknown category {doc['category']!r}")
            gt = doc.get("gt_value")
            if gt is not None and (not isinstance(gt, (int, float))
                                   or not math.isfinite(gt) or gt <= 0):
                bad(line_no, rid, "gt_value", "must be a positive finite number")
            unit = doc.get("gt_unit", "meter")
            if unit not in ("millimeter", "centimeter", "meter", "kilometer",
                            "inch", "foot", "yard"):
                bad(line_no, rid, "gt_unit", f"unknown unit {unit!r}")
            scene = doc.get("scene")
            if scene is not None:
                glyph = scene.get("glyph")
                geom = scene.get("geom")
                if not isinstance(glyph, int) or not (0 <= glyph < N_GLYPHS):
                    bad(line_no, rid, "scene.glyph", "glyph id out of range")
                if not isinstance(geom, (int, float)) or not (
                        GEOM_MIN <= float(geom) <= GEOM_MAX * 1.0000001):
                    bad(line_no, rid, "scene.geom", "metric scalar out of range")
            for bi, box in enumerate(doc.get("bboxes", [])):
                if (not isinstance(box, list) or len(box) != 4
                        or not all(isinstance(v, (int, float)) for v in box)):
                    bad(line_no, rid, f"bboxes[{bi}]", "box must be [x, y, w, h]")
                    continue
                x, y, w, h = map(float, box)
                if not all(0.0 <= v <= 1.0 for v in (x, y, w, h)):
                    bad(line_no, rid, f"bboxes[{bi}]", "fields must lie in [0, 1]")
                elif x + w > 1.0 + 1e-9:
                    bad(line_no, rid, f"bboxes[{bi}].x+w", "x + w exceeds 1")
                elif y + h > 1.0 + 1e-9:
                    bad(line_no, rid, f"bboxes[{bi}].y+h", "y + h exceeds 1")
    return violations
