"""Evaluation datasets, accuracy metrics, random baselines and table-shaped reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .scenegen.vqa import CATEGORIES, CATEGORY_SPLIT, RECORD_FIELDS, VQASample, rle_decode

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TABLE_COLUMNS = ("Avg", "Sta", "Dyn", "VG", "DM", "SR", "R", "C", "T", "FP", "SA", "DP")
EXTRA_COLUMNS = ("DUR",)
REL_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
FORMATS = ("csv", "json", "text")


class DatasetError(ValueError):
    pass


@dataclass
class EvalDataset:
    samples: list[VQASample] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    source: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def validate_sample(s: VQASample) -> None:
    if s.category not in CATEGORIES:
        raise DatasetError(f"unknown category {s.category!r}")
    if CATEGORY_SPLIT[s.category] != s.split:
        raise DatasetError(f"category {s.category} belongs to split {CATEGORY_SPLIT[s.category]}, not {s.split!r}")
    if not s.options:
        raise DatasetError("no options")
    if len(s.timestamps) < 1 or any(b <= a for a, b in zip(s.timestamps, s.timestamps[1:])):
        raise DatasetError("timestamps must be non-empty and strictly increasing")
    for token, reg in s.regions.items():
        mask = rle_decode(reg["mask"])
        H, W = mask.shape
        x0, y0, x1, y1 = reg["box"]
        if not (0 <= x0 <= x1 < W and 0 <= y0 <= y1 < H):
            raise DatasetError(f"region {token} box {reg['box']} outside the {H}x{W} mask")
        if token not in s.question:
            raise DatasetError(f"region {token} is not referenced by the question")


def load_dataset(path, source: str | None = None) -> EvalDataset:
    """Read a JSONL question file; any invalid line aborts with its line number."""
    path = Path(path)
    samples, seen = [], {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sample = VQASample.from_record(json.loads(line))
                validate_sample(sample)
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            if sample.key in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate of line {seen[sample.key]} for key {sample.key}")
            seen[sample.key] = lineno
            samples.append(sample)
    if not samples:
        log.warning("dataset %s is empty", path)
    return EvalDataset(samples, SCHEMA_VERSION, source if source is not None else str(path))


def save_dataset(dataset: EvalDataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in dataset.samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True, separators=(",", ":")) + "\n")
    return path


# -- metrics ----------------------------------------------------------------------------

def _mean(values) -> float:
    # exact rational accumulation, so a bucket of 1/5 expectations is exactly 0.2
    return float(sum(Fraction(v) for v in values) / len(values))


def _aggregate(values: list[float], samples: list[VQASample]) -> dict:
    """Per-category, per-split and overall means of per-sample ``values`` with counts."""
    by_cat: dict[str, list[float]] = {}
    for v, s in zip(values, samples):
        by_cat.setdefault(s.category, []).append(v)
    cats = {c: (_mean(v), len(v)) for c, v in by_cat.items()}
    splits = {}
    for split in ("static", "dynamic"):
        vals = [v for v, s in zip(values, samples) if s.split == split]
        if vals:
            splits[split] = (_mean(vals), len(vals))
    overall = _mean(values) if values else float("nan")
    return {"overall": overall, "splits": splits, "categories": cats, "count": len(values)}


def mcq_accuracy(predictions, dataset: EvalDataset) -> dict:
    """``predictions`` is a sequence aligned with the dataset or a dict keyed by sample key."""
    samples = list(dataset)
    if isinstance(predictions, dict):
        missing = [s.key for s in samples if s.key not in predictions]
        if missing:
            raise ValueError(f"no prediction for {len(missing)} sample(s), first {missing[0]}")
        preds = [predictions[s.key] for s in samples]
    else:
        preds = list(predictions)
        if len(preds) != len(samples):
            raise ValueError(f"{len(preds)} predictions for {len(samples)} samples")
    correct = [float(int(p) == s.answer_index) for p, s in zip(preds, samples)]
    return _aggregate(correct, samples)


def relative_accuracy(pred_values, gt_values, thresholds=REL_THRESHOLDS) -> float:
    """Threshold-sweep agreement for numeric answers.

    For each threshold t the score is the fraction of samples with
    ``|pred - gt| / gt < 1 - t``; the result is the mean over thresholds. This is a
    local stand-in definition, not the exact metric of any external benchmark.
    """
    pred = np.asarray(pred_values, dtype=np.float64)
    gt = np.asarray(gt_values, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must have the same shape")
    if (gt <= 0).any():
        raise ValueError("ground-truth values must be positive")
    rel = np.abs(pred - gt) / gt
    # a tiny slack keeps ratios such as 1.3*gt from flipping on round-off
    return float(np.mean([np.mean(rel < (1.0 - t) - 1e-12) for t in thresholds]))


def random_baseline(dataset: EvalDataset, mode: str = "analytic", draws: int = 10_000, seed: int = 0) -> dict:
    samples = list(dataset)
    if any(not s.options for s in samples):
        raise ValueError("every sample needs at least one option")
    if mode == "analytic":
        return _aggregate([Fraction(1, len(s.options)) for s in samples], samples)
    if mode == "monte-carlo":
        rng = np.random.default_rng(seed)
        hits = [float(np.mean(rng.integers(0, len(s.options), size=draws) == s.answer_index)) for s in samples]
        return _aggregate(hits, samples)
    raise ValueError(f"unknown baseline mode {mode!r}")


# -- reports -----------------------------------------------------------------------------

@dataclass
class EvalReport:
    overall: float
    splits: dict
    categories: dict
    random: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, predictions, dataset: EvalDataset, **meta) -> "EvalReport":
        acc = mcq_accuracy(predictions, dataset)
        rnd = random_baseline(dataset, "analytic")
        meta.setdefault("scoring", "option log-likelihood, mean per token, ties to lowest index")
        return cls(acc["overall"], acc["splits"], acc["categories"], rnd, meta)

    def recompute_overall(self) -> float:
        total = sum(n for _, n in self.categories.values())
        return sum(a * n for a, n in self.categories.values()) / total if total else float("nan")

    def check(self, tol: float = 1e-9) -> None:
        r = self.recompute_overall()
        if not (math.isnan(r) and math.isnan(self.overall)) and abs(r - self.overall) > tol:
            raise AssertionError(f"overall {self.overall} != count-weighted category mean {r}")

    def columns(self) -> list[str]:
        cols = list(TABLE_COLUMNS)
        cols += [c for c in EXTRA_COLUMNS if c in self.categories]
        return cols

    def row(self, which: str = "model") -> dict[str, float | None]:
        src = {"overall": self.overall, "splits": self.splits, "categories": self.categories}
        if which == "random":
            src = self.random
        out = {"Avg": src["overall"]}
        out["Sta"] = src["splits"].get("static", (None,))[0]
        out["Dyn"] = src["splits"].get("dynamic", (None,))[0]
        for c in self.columns()[3:]:
            out[c] = src["categories"][c][0] if c in src["categories"] else None
        return out

    def to_record(self) -> dict:
        return asdict(self)


def _cell(v) -> str:
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.1f}"


def render_report(report: EvalReport, fmt: str = "text") -> str:
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    report.check()
    cols = report.columns()
    rows = [("Model", report.row("model")), ("Random", report.row("random"))]
    footer = f"recompute: count-weighted category mean = {_cell(report.recompute_overall())} (Avg {_cell(report.overall)})"
    if fmt == "json":
        rec = {
            "columns": cols,
            "rows": {name: {c: r[c] for c in cols} for name, r in rows},
            "counts": {c: n for c, (_, n) in sorted(report.categories.items())},
            "meta": report.meta,
            "footer": footer,
        }
        return json.dumps(rec, sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Method", *cols])
        for name, r in rows:
            w.writerow([name, *(_cell(r[c]) for c in cols)])
        buf.write(f"# {footer}\n")
        return buf.getvalue()
    header = ["Method", *cols]
    body = [[name, *(_cell(r[c]) for c in cols)] for name, r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(x.rjust(wd) for x, wd in zip(line, widths)) for line in [header, *body]]
    return "\n".join(lines + [footer]) + "\n"


def emit_report(report: EvalReport, fmt: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_report(report, fmt), encoding="utf-8")
    return path


def parse_footer(text: str) -> tuple[str, str]:
    """Return the (recomputed, reported) Avg strings embedded in a rendered footer."""
    line = next(l for l in text.splitlines() if "recompute:" in l)
    recomputed = line.split("=")[1].split("(")[0].strip()
    reported = line.split("(Avg")[1].rstrip(")\" ,").strip()
    return recomputed, reported


__all__ = [
    "EvalDataset", "EvalReport", "DatasetError", "RECORD_FIELDS", "REL_THRESHOLDS", "TABLE_COLUMNS",
    "emit_report", "load_dataset", "mcq_accuracy", "random_baseline", "relative_accuracy",
    "render_report", "save_dataset", "validate_sample",
]
