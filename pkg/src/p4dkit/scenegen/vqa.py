"""Templated region-prompted multiple-choice questions with answers read from scene metadata."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .scene import SceneMeta

log = logging.getLogger(__name__)

CATEGORIES = ("VG", "DM", "SR", "R", "C", "T", "FP", "SA", "DP", "DUR")
STATIC_CATEGORIES = ("VG", "DM", "SR")
DYNAMIC_CATEGORIES = ("R", "C", "T", "FP", "SA", "DP")
# DUR is the timing probe; it has no home in the benchmark split, we file it as dynamic
CATEGORY_SPLIT = {**{c: "static" for c in STATIC_CATEGORIES}, **{c: "dynamic" for c in DYNAMIC_CATEGORIES}, "DUR": "dynamic"}
NUMERIC_MULTIPLIERS = (0.25, 0.5, 2.0, 4.0)
RECORD_FIELDS = ("video_id", "timestamps", "question", "options", "answer_index", "regions", "category", "split")

DEFAULT_TEMPLATES: dict[str, list[str]] = {
    "VG": ["how far is {R1} from the camera in meters ?"],
    "DM": ["how tall is {R1} in meters ?", "how wide is {R1} in meters ?"],
    "SR": ["what is the distance between {R1} and {R2} in meters ?"],
    "R": ["how does the camera rotate ?"],
    "C": ["how many objects are moving ?"],
    "T": ["in which direction does {R1} move ?"],
    "FP": ["is {R1} moving closer to the camera ?"],
    "SA": ["what is the average speed of {R1} in meters per second ?"],
    "DP": ["how far does {R1} travel in meters ?"],
    "DUR": ["how many seconds have passed in the video ?"],
}

DIRECTION_VOCAB = ("left", "right", "closer", "farther")
ROTATION_VOCAB = ("left", "right", "up", "down", "it does not rotate")
FP_VOCAB = ("yes", "no it moves away", "no it moves sideways", "no it is static")
MIN_REGION_PIXELS = 4


@dataclass
class VQASample:
    video_id: str
    timestamps: list[float]
    question: str
    options: list[str]
    answer_index: int
    regions: dict[str, dict]
    category: str
    split: str

    def __post_init__(self):
        if not 0 <= self.answer_index < len(self.options):
            raise ValueError(f"answer_index {self.answer_index} outside {len(self.options)} options")

    @property
    def key(self) -> tuple[str, str]:
        return (self.video_id, self.question)

    def to_record(self) -> dict:
        return {f: getattr(self, f) for f in RECORD_FIELDS}

    @classmethod
    def from_record(cls, rec: dict) -> "VQASample":
        missing = [f for f in RECORD_FIELDS if f not in rec]
        if missing:
            raise ValueError(f"record missing fields {missing}")
        extra = sorted(set(rec) - set(RECORD_FIELDS))
        if extra:
            raise ValueError(f"record has unknown fields {extra}")
        return cls(**{f: rec[f] for f in RECORD_FIELDS})


def rle_encode(mask: np.ndarray) -> dict:
    """Run-length encoding over row-major pixel order; runs alternate 0/1 starting with 0."""
    flat = np.asarray(mask, dtype=bool).ravel()
    counts = []
    current = False
    run = 0
    for v in flat:
        if v == current:
            run += 1
        else:
            counts.append(run)
            current = v
            run = 1
    counts.append(run)
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    H, W = rle["size"]
    counts = rle["counts"]
    if sum(counts) != H * W:
        raise ValueError(f"run lengths sum to {sum(counts)}, expected {H * W}")
    vals = np.zeros(len(counts), dtype=bool)
    vals[1::2] = True
    return np.repeat(vals, counts).reshape(H, W)


def format_numeral(x: float) -> str:
    """Round to two significant digits and print without an exponent."""
    if x <= 0 or not math.isfinite(x):
        raise ValueError(f"numeric answers must be positive and finite, got {x}")
    exp = math.floor(math.log10(x))
    mant = round(x / 10**exp, 1)
    if mant >= 10:
        mant, exp = mant / 10, exp + 1
    val = mant * 10**exp
    decimals = max(0, 1 - exp)
    text = f"{val:.{decimals}f}"
    return text.rstrip("0").rstrip(".") if "." in text else text


def numeric_options(value: float) -> list[str]:
    return [format_numeral(value)] + [format_numeral(value * m) for m in NUMERIC_MULTIPLIERS]


def _region_entry(meta: SceneMeta, k: int) -> dict | None:
    mask = meta.first_frame_mask(k)
    if mask.sum() < MIN_REGION_PIXELS:
        return None
    rows, cols = np.nonzero(mask)
    box = [int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())]
    return {"box": box, "mask": rle_encode(mask)}


def _relative_motion(meta: SceneMeta, k: int) -> tuple[float, float]:
    """Lateral and depth change of object ``k`` in camera coordinates, first to last frame."""
    d = meta.centers_cam[-1, k] - meta.centers_cam[0, k]
    return float(d[0]), float(d[2])


def _camera_rotation(meta: SceneMeta) -> tuple[float, float]:
    fwd0 = meta.rotations[0].T @ np.array([0.0, 0.0, 1.0])
    fwd1 = meta.rotations[-1].T @ np.array([0.0, 0.0, 1.0])
    yaw = math.atan2(fwd1[0], fwd1[2]) - math.atan2(fwd0[0], fwd0[2])
    pitch = math.asin(-np.clip(fwd1[1], -1, 1)) - math.asin(-np.clip(fwd0[1], -1, 1))
    return yaw, pitch


def _answer(category: str, meta: SceneMeta, objs: list[int], rng) -> tuple[str, list[str]] | None:
    """Correct answer plus candidate distractors, or None when the template does not apply."""
    if category == "VG":
        return _numeric(float(meta.centers_cam[0, objs[0], 2]))
    if category == "DM":
        return None  # handled with template index in make_vqa
    if category == "SR":
        return _numeric(float(np.linalg.norm(meta.positions[0, objs[0]] - meta.positions[0, objs[1]])))
    if category == "R":
        yaw, pitch = _camera_rotation(meta)
        if max(abs(yaw), abs(pitch)) < math.radians(1.0):
            ans = "it does not rotate"
        elif abs(yaw) >= abs(pitch):
            ans = "right" if yaw > 0 else "left"
        else:
            ans = "up" if pitch > 0 else "down"
        others = [v for v in ROTATION_VOCAB if v != ans]
        return ans, list(rng.choice(others, size=3, replace=False))
    if category == "C":
        count = int(sum(np.any(meta.velocities != 0, axis=1)))
        pool = [str(c) for c in range(0, 7) if c != count]
        return str(count), list(rng.choice(pool, size=3, replace=False))
    if category == "T":
        k = objs[0]
        if not np.any(meta.velocities[k] != 0):
            return None
        dx, dz = _relative_motion(meta, k)
        if abs(dx) >= abs(dz):
            ans = "right" if dx > 0 else "left"
        else:
            ans = "farther" if dz > 0 else "closer"
        return ans, [v for v in DIRECTION_VOCAB if v != ans]
    if category == "FP":
        k = objs[0]
        if not np.any(meta.velocities[k] != 0):
            ans = "no it is static"
        else:
            dx, dz = _relative_motion(meta, k)
            if abs(dz) > abs(dx):
                ans = "yes" if dz < 0 else "no it moves away"
            else:
                ans = "no it moves sideways"
        return ans, [v for v in FP_VOCAB if v != ans]
    if category == "SA":
        k = objs[0]
        if meta.speed[k] <= 0:
            return None
        return _numeric(float(meta.speed[k]))
    if category == "DP":
        k = objs[0]
        if meta.path_length[k] <= 0:
            return None
        return _numeric(float(meta.path_length[k]))
    if category == "DUR":
        return _numeric(meta.clip_length)
    raise ValueError(f"unknown category {category!r}")


def _numeric(value: float) -> tuple[str, list[str]]:
    opts = numeric_options(value)
    return opts[0], opts[1:]


def _regions_needed(template: str) -> int:
    return sum(1 for r in ("{R1}", "{R2}") if r in template)


def make_vqa(
    meta: SceneMeta,
    templates: dict[str, list[str]] | None = None,
    seed: int = 0,
    categories: Iterable[str] | None = None,
) -> list[VQASample]:
    """One question per applicable (category, template); inapplicable templates are skipped and logged."""
    templates = DEFAULT_TEMPLATES if templates is None else templates
    rng = np.random.default_rng(seed)
    cats = list(categories) if categories is not None else list(templates)
    visible = [k for k in range(meta.n_objects) if meta.first_frame_mask(k).sum() >= MIN_REGION_PIXELS]
    out: list[VQASample] = []
    for cat in cats:
        if cat not in CATEGORY_SPLIT:
            raise ValueError(f"unknown category {cat!r}")
        for ti, template in enumerate(templates[cat]):
            need = _regions_needed(template)
            if len(visible) < need:
                log.info("skip %s on %s: needs %d visible regions, scene has %d", cat, meta.video_id, need, len(visible))
                continue
            objs = [int(k) for k in rng.choice(visible, size=need, replace=False)] if need else []
            if cat == "DM":
                dim = 1 if "tall" in template else 0
                res = _numeric(float(meta.sizes[objs[0], dim]))
            else:
                res = _answer(cat, meta, objs, rng)
            if res is None:
                log.info("skip %s on %s: template not applicable", cat, meta.video_id)
                continue
            answer, distractors = res
            options = [answer] + [str(d) for d in distractors]
            order = rng.permutation(len(options))
            options = [options[i] for i in order]
            answer_index = int(np.nonzero(order == 0)[0][0])
            region_tokens = {}
            for j, k in enumerate(objs):
                entry = _region_entry(meta, k)
                region_tokens[f"<R{j + 1}>"] = entry
            question = template.format(**{f"R{j + 1}": f"<R{j + 1}>" for j in range(len(objs))})
            out.append(
                VQASample(
                    video_id=meta.video_id,
                    timestamps=[float(t) for t in meta.timestamps],
                    question=question,
                    options=options,
                    answer_index=answer_index,
                    regions=region_tokens,
                    category=cat,
                    split=CATEGORY_SPLIT[cat],
                )
            )
    return out


def write_jsonl(path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
