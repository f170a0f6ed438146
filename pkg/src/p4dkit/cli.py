"""Command line entry point: ``p4d <command> [flags]``.

Exit codes:
  0  success
  1  unexpected internal error
  2  invalid configuration or usage
  3  missing prerequisite artifact (data, teacher or student checkpoint)
  4  training diverged (non-finite loss)
  5  verification suite reported a failure
  6  invalid dataset record
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .evalkit import DatasetError, EvalDataset, EvalReport, emit_report, load_dataset, render_report, save_dataset
from .nnkit import file_hash, float_mode
from .p4d import (
    ABLATION_ROWS,
    PerceptionDecoder,
    TeacherCache,
    ablation_config,
    save_decoder,
    snapshot_explicit,
    snapshot_teacher,
    train,
)
from .nnkit.checkpoint import load_checkpoint
from .pipeline import Scene, build_items, evaluate_student, stage_seeds, teacher_tensors
from .scenegen import generate_scene, scene_from_record, scene_to_record, sample_scene_spec
from .scenegen.vqa import read_jsonl, write_jsonl
from .student import StudentModel, answer_mcq
from .teacher4d import TeacherModel, TrainingDiverged, pretrain_teacher

log = logging.getLogger("p4dkit")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED, EXIT_VERIFY, EXIT_DATASET = range(7)
DATA_SPLITS = ("teacher_train", "teacher_val", "train", "test")


class MissingArtifact(FileNotFoundError):
    pass


class VerificationFailed(RuntimeError):
    pass


def source_revision() -> str:
    """Content hash of the package sources, standing in for a VCS revision."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _require(path, what: str) -> Path:
    if path is None:
        raise MissingArtifact(f"{what} is required (pass it on the command line)")
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}")
    return path


# -- run directory and manifest -----------------------------------------------------------

class Run:
    """Outputs of one command, isolated in ``<out>/<command>-<manifest hash>``."""

    def __init__(self, args, cfg: ExperimentConfig, inputs: dict[str, Path]):
        self.started = time.time()
        self.seeds = stage_seeds(args.seed)
        self.manifest = {
            "command": args.command,
            "argv": sys.argv[1:],
            "config": cfg.to_record(),
            "seed": args.seed,
            "seeds": self.seeds,
            "float_mode": "64" if args.float64 else "32",
            "source_revision": source_revision(),
            "inputs": {k: {"path": str(p), "sha256": _hash_path(p)} for k, p in sorted(inputs.items())},
        }
        key = json.dumps({k: v for k, v in self.manifest.items() if k != "argv"}, sort_keys=True, default=str)
        self.hash = hashlib.sha256(key.encode()).hexdigest()
        self.dir = Path(args.out) / f"{args.command}-{self.hash[:12]}"
        self.outputs: list[Path] = []
        self.timings: dict[str, float] = {}

    def path(self, name: str) -> Path:
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    @contextlib.contextmanager
    def timed(self, label: str):
        t0 = time.time()
        yield
        self.timings[label] = round(time.time() - t0, 3)

    def finish(self, status: str, error: str | None = None) -> Path:
        if status != "ok":
            for p in self.outputs:
                if p.is_dir():
                    shutil.rmtree(p, ignore_errors=True)
                elif p.exists():
                    p.unlink()
            self.outputs = []
        self.manifest.update(
            status=status,
            error=error,
            outputs={str(p.relative_to(self.dir)): _hash_path(p) for p in sorted(set(self.outputs)) if p.exists()},
            timings={**self.timings, "total": round(time.time() - self.started, 3)},
        )
        self.dir.mkdir(parents=True, exist_ok=True)
        out = self.dir / "manifest.json"
        out.write_text(json.dumps(self.manifest, indent=2, sort_keys=True, default=str) + "\n")
        return out


def _hash_path(p: Path) -> str:
    p = Path(p)
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(x for x in p.rglob("*") if x.is_file() and x.name != "manifest.json"):
            h.update(str(f.relative_to(p)).encode())
            h.update(file_hash(f).encode())
        return h.hexdigest()
    return file_hash(p)


# -- data helpers ---------------------------------------------------------------------------

def split_seeds(scene_seed: int, counts: dict[str, int]) -> dict[str, list[int]]:
    children = np.random.SeedSequence(scene_seed).spawn(len(DATA_SPLITS))
    return {
        split: [int(x) for x in np.random.default_rng(c).choice(2**31 - 1, size=counts[split], replace=False)]
        for split, c in zip(DATA_SPLITS, children)
    }


def load_scenes(data_dir: Path, split: str) -> list[Scene]:
    path = _require(data_dir / f"scenes_{split}.jsonl", f"scene file for split {split!r}")
    return [Scene(*generate_scene(scene_from_record(r))) for r in read_jsonl(path)]


def load_items(data_dir: Path, split: str):
    scenes = {s.video.video_id: s for s in load_scenes(data_dir, split)}
    dataset = load_dataset(_require(data_dir / f"vqa_{split}.jsonl", f"question file for split {split!r}"))
    missing = [s.video_id for s in dataset if s.video_id not in scenes]
    if missing:
        raise DatasetError(f"questions reference unknown videos, first {missing[0]}")
    return [(scenes[s.video_id].video, s) for s in dataset]


def load_teacher(path, cfg: ExperimentConfig) -> TeacherModel:
    return TeacherModel.load(_require(path, "teacher checkpoint"), cfg.teacher, freeze=True)


# -- commands -------------------------------------------------------------------------------

def cmd_synth(args, cfg, run: Run) -> None:
    counts = {s: getattr(cfg.data, s) for s in DATA_SPLITS}
    seeds = split_seeds(run.seeds["scene"], counts)
    for split in DATA_SPLITS:
        specs = [sample_scene_spec(s, cfg.scene, f"{split}-{i:05d}") for i, s in enumerate(seeds[split])]
        write_jsonl(run.path(f"scenes_{split}.jsonl"), (scene_to_record(sp) for sp in specs))
        if split in ("train", "test"):
            scenes = [Scene(*generate_scene(sp)) for sp in specs]
            items = build_items(scenes, cfg.data.categories, seed=run.seeds["scene"] % 2**31 + (split == "test"))
            save_dataset(EvalDataset([s for _, s in items]), run.path(f"vqa_{split}.jsonl"))
    log.info("synthesised %s", {k: len(v) for k, v in seeds.items()})


def cmd_train_teacher(args, cfg, run: Run) -> None:
    data = _require(args.data, "data directory from `p4d synth`")
    tcfg = replace(cfg.teacher, seed=run.seeds["teacher"] % 2**31)
    pcfg = replace(cfg.pretrain, seed=run.seeds["shuffle"] % 2**31)
    train_t = teacher_tensors(load_scenes(data, "teacher_train"))
    val_t = teacher_tensors(load_scenes(data, "teacher_val"))
    with run.timed("pretrain"):
        model, metrics = pretrain_teacher(train_t, val_t, tcfg, pcfg)
    model.freeze()
    model.save(run.path("teacher.ckpt"))
    metrics["teacher_config"] = dataclasses.asdict(tcfg)
    metrics["frozen_hash"] = model.frozen_hash
    run.path("teacher_metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"init": metrics["init"], "final": metrics["final"]}, sort_keys=True))


def _student_cfg(cfg: ExperimentConfig, run: Run, variant: str | None):
    variant = variant or cfg.distill.variant
    scfg = replace(cfg.student, variant=variant, seed=run.seeds["student"] % 2**31)
    dcfg = replace(cfg.distill, variant=variant, seed=run.seeds["shuffle"] % 2**31)
    return scfg, dcfg


def cmd_train(args, cfg, run: Run) -> None:
    data = _require(args.data, "data directory from `p4d synth`")
    teacher = load_teacher(args.teacher, cfg)
    scfg, dcfg = _student_cfg(cfg, run, args.variant)
    items = load_items(data, "train")
    student = StudentModel(scfg)
    cache = TeacherCache(teacher, run.dir / "teacher_cache")
    with run.timed("train"):
        student, d4dp, report = train(dcfg, items, teacher, student, cache)
    report.check_decomposition()
    student.save(run.path("student.ckpt"))
    if d4dp is not None:
        save_decoder(d4dp, run.path("d4dp.ckpt"))
    with run.path("report.jsonl").open("w") as fh:
        for rec in report.steps:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({"summary": {"seed": report.seed, "hashes": report.hashes, "config": report.config,
                                          "student_config": dataclasses.asdict(scfg),
                                          "hidden_block": scfg.hidden_block}}, sort_keys=True) + "\n")
    shutil.rmtree(run.dir / "teacher_cache", ignore_errors=True)
    print(json.dumps({"final": report.steps[-1] if report.steps else None, "hashes": report.hashes}, sort_keys=True))


def _load_student(path, cfg: ExperimentConfig, variant: str | None) -> StudentModel:
    scfg = replace(cfg.student, variant=variant or cfg.distill.variant)
    return StudentModel.load(_require(path, "student checkpoint"), scfg)


def cmd_eval(args, cfg, run: Run) -> None:
    data = _require(args.data, "data directory from `p4d synth`")
    student = _load_student(args.student, cfg, args.variant)
    teacher = load_teacher(args.teacher, cfg) if student.needs_teacher else None
    items = load_items(data, "test")
    report = evaluate_student(student, items, teacher, seed=args.seed)
    for fmt in cfg.eval.formats:
        emit_report(report, fmt, run.path(f"eval.{ 'txt' if fmt == 'text' else fmt}"))
    print(render_report(report, "text"), end="")


def _sweep_job(job):
    """One (row, seed) cell of an ablation sweep; runs in a worker process when --jobs > 1."""
    row, seed, cfg_record, data_dir, teacher_path, float64 = job
    cfg = load_config_from_record(cfg_record)
    with float_mode("64" if float64 else "32"):
        teacher = TeacherModel.load(teacher_path, cfg.teacher, freeze=True)
        seeds = stage_seeds(seed)
        dcfg = ablation_config(row, replace(cfg.distill, seed=seeds["shuffle"] % 2**31))
        scfg = replace(cfg.student, variant=dcfg.variant, seed=seeds["student"] % 2**31)
        student = StudentModel(scfg)
        train_items = load_items(Path(data_dir), "train")
        test_items = load_items(Path(data_dir), "test")
        student, _, report = train(dcfg, train_items, teacher, student, TeacherCache(teacher))
        ev = evaluate_student(student, test_items, teacher if student.needs_teacher else None, row=row, seed=seed)
    return row, seed, ev.to_record(), report.steps[-1] if report.steps else None


def load_config_from_record(rec: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for section, values in rec.items():
        sub = getattr(cfg, section)
        for k, v in values.items():
            setattr(sub, k, tuple(v) if isinstance(v, list) else v)
    return cfg


def sweep_table(results: list[dict]) -> EvalReport | dict:
    """Mean accuracy per row over seeds; a pure function of the stored per-run reports."""
    rows: dict[str, list[dict]] = {}
    for r in results:
        rows.setdefault(r["row"], []).append(r["report"])
    table = {}
    for row, reports in rows.items():
        cats = sorted({c for rep in reports for c in rep["categories"]})
        table[row] = {
            "Avg": float(np.mean([rep["overall"] for rep in reports])),
            "Sta": _mean_split(reports, "static"),
            "Dyn": _mean_split(reports, "dynamic"),
            **{c: float(np.mean([rep["categories"][c][0] for rep in reports if c in rep["categories"]])) for c in cats},
            "n_seeds": len(reports),
        }
    return table


def _mean_split(reports, split):
    vals = [rep["splits"][split][0] for rep in reports if split in rep["splits"]]
    return float(np.mean(vals)) if vals else None


def render_sweep(table: dict) -> str:
    from .evalkit import TABLE_COLUMNS

    cols = [c for c in TABLE_COLUMNS if any(c in r for r in table.values())]
    header = ["Method", *cols, "seeds"]
    body = [[row, *("-" if r.get(c) is None else f"{100 * r[c]:.1f}" for c in cols), str(r["n_seeds"])] for row, r in table.items()]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    return "\n".join("  ".join(x.rjust(w) for x, w in zip(line, widths)) for line in [header, *body]) + "\n"


def cmd_sweep(args, cfg, run: Run) -> None:
    data = _require(args.data, "data directory from `p4d synth`")
    teacher_path = _require(args.teacher, "teacher checkpoint")
    unknown = [r for r in cfg.sweep.rows if r not in ABLATION_ROWS]
    if unknown:
        raise ConfigError(f"unknown sweep rows {unknown}; valid rows: {list(ABLATION_ROWS)}")
    jobs = [(row, seed, cfg.to_record(), str(data), str(teacher_path), args.float64)
            for row in cfg.sweep.rows for seed in cfg.sweep.seeds]
    with run.timed("sweep"):
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as ex:
                outs = list(ex.map(_sweep_job, jobs))
        else:
            outs = [_sweep_job(j) for j in jobs]
    results = [{"row": row, "seed": seed, "report": rep, "final_step": last} for row, seed, rep, last in outs]
    with run.path("runs.jsonl").open("w") as fh:
        for r in results:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    table = sweep_table(results)
    run.path("sweep.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    text = render_sweep(table)
    run.path("sweep.txt").write_text(text)
    print(text, end="")


def cmd_verify(args, cfg, run: Run) -> None:
    from .verify import run_checks

    results = run_checks()
    lines = [f"{'PASS' if ok else 'FAIL'}  {name}: {detail}" for name, ok, detail in results]
    run.path("verify.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        raise VerificationFailed(f"{len(failed)} check(s) failed: {', '.join(failed)}")


def cmd_snapshot(args, cfg, run: Run) -> None:
    data = _require(args.data, "data directory from `p4d synth`")
    teacher = load_teacher(args.teacher, cfg)
    items = load_items(data, "test")
    if not 0 <= args.index < len(items):
        raise ConfigError(f"--index {args.index} outside the {len(items)} test questions")
    video, sample = items[args.index]
    out = run.dir / "snapshots"
    paths = [snapshot_teacher(teacher, video, args.modality, out)]
    if args.student:
        student = _load_student(args.student, cfg, args.variant)
        state = load_checkpoint(_require(args.decoder, "D_4DP checkpoint"), "d4dp")
        d4dp = PerceptionDecoder(cfg.student.d_model, cfg.teacher.latent_dim, cfg.distill.decoder_hidden)
        d4dp.load_state_dict({k: torch.as_tensor(v, dtype=torch.get_default_dtype()) for k, v in state.items()})
        paths.append(snapshot_explicit(student, d4dp, teacher, video, sample, args.modality, out, args.tag))
    run.outputs.extend(paths)
    for p in paths:
        print(p)


COMMANDS = {
    "synth": (cmd_synth, ()),
    "train-teacher": (cmd_train_teacher, ("data",)),
    "train": (cmd_train, ("data", "teacher")),
    "eval": (cmd_eval, ("data", "student", "teacher")),
    "sweep": (cmd_sweep, ("data", "teacher")),
    "verify": (cmd_verify, ()),
    "snapshot": (cmd_snapshot, ("data", "teacher", "student", "decoder")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p4d", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file (one include level)")
    common.add_argument("--seed", type=int, default=0, help="master seed, fanned out per stage")
    common.add_argument("--out", default="runs", help="root directory for run outputs")
    common.add_argument("--float64", action="store_true", help="64-bit deterministic mode")
    common.add_argument("--variant", choices=("plain", "concat4d", "pe4d"), default=None)
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name != "synth" and name != "verify":
            p.add_argument("--data", help="directory written by `p4d synth`")
        if name in ("train", "eval", "sweep", "snapshot"):
            p.add_argument("--teacher", help="frozen teacher checkpoint")
        if name in ("eval", "snapshot"):
            p.add_argument("--student", help="student checkpoint")
        if name == "snapshot":
            p.add_argument("--decoder", help="D_4DP checkpoint written by `p4d train`")
            p.add_argument("--modality", default="depth", choices=("depth", "flow", "motion", "camray"))
            p.add_argument("--index", type=int, default=0, help="test question index")
            p.add_argument("--tag", default="final", help="step tag in the image file name")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fn, input_flags = COMMANDS[args.command]
    inputs = {k: Path(getattr(args, k)) for k in input_flags if getattr(args, k, None) and Path(getattr(args, k)).exists()}
    if args.config:
        inputs["config"] = Path(args.config)
    run = Run(args, cfg, inputs)
    code, status, error = EXIT_OK, "ok", None
    try:
        # replayable snapshot: `--config <run dir>/config.txt` rebuilds the same ExperimentConfig
        run.path("config.txt").write_text(dump_config(cfg))
        if args.float64:
            torch.use_deterministic_algorithms(True)
        with float_mode("64" if args.float64 else "32"):
            fn(args, cfg, run)
    except MissingArtifact as exc:
        code, status, error = EXIT_MISSING, "missing-prerequisite", str(exc)
    except ConfigError as exc:
        code, status, error = EXIT_CONFIG, "config-error", str(exc)
    except TrainingDiverged as exc:
        code, status, error = EXIT_DIVERGED, "diverged", str(exc)
    except VerificationFailed as exc:
        code, status, error = EXIT_VERIFY, "verify-failed", str(exc)
    except DatasetError as exc:
        code, status, error = EXIT_DATASET, "invalid-dataset", str(exc)
    except Exception as exc:  # noqa: BLE001 - the manifest must record any failure before exit
        log.exception("unexpected failure")
        code, status, error = EXIT_INTERNAL, "internal-error", f"{type(exc).__name__}: {exc}"
    manifest = run.finish(status, error)
    if error:
        print(f"{status}: {error}", file=sys.stderr)
    print(f"manifest: {manifest}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
