"""Experiment plumbing shared by the command line and the test suites: datasets, stages, evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .evalkit import EvalDataset, EvalReport
from .p4d import DistillConfig, PreparedData, TeacherCache, prepare, train
from .scenegen import SceneConfig, generate_scene, make_vqa, sample_scene_spec
from .scenegen.scene import SceneMeta, SignalSet, VideoTensor
from .scenegen.vqa import VQASample
from .student import StudentConfig, StudentModel, answer_mcq
from .teacher4d import PretrainConfig, TeacherConfig, TeacherModel, frames_tensor, pretrain_teacher, signals_tensor

log = logging.getLogger(__name__)

STAGES = ("scene", "teacher", "student", "shuffle")


def stage_seeds(master: int) -> dict[str, int]:
    """Fan a master seed out to per-stage seeds: child i of ``SeedSequence(master)`` feeds stage i."""
    children = np.random.SeedSequence(master).spawn(len(STAGES))
    return {name: int(c.generate_state(1)[0]) for name, c in zip(STAGES, children)}


@dataclass
class Scene:
    video: VideoTensor
    signals: SignalSet
    meta: SceneMeta


def build_scenes(seeds, cfg: SceneConfig | None = None, prefix: str = "scene") -> list[Scene]:
    cfg = cfg or SceneConfig()
    return [Scene(*generate_scene(sample_scene_spec(int(s), cfg, f"{prefix}-{int(s)}"))) for s in seeds]


def teacher_tensors(scenes: list[Scene]) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    return frames_tensor([s.video for s in scenes]), signals_tensor([s.signals for s in scenes])


def build_items(scenes: list[Scene], categories=None, seed: int = 0) -> list[tuple[VideoTensor, VQASample]]:
    items = []
    for i, sc in enumerate(scenes):
        for sample in make_vqa(sc.meta, seed=seed + i, categories=categories):
            items.append((sc.video, sample))
    return items


def fit_teacher(train_scenes, val_scenes, tcfg: TeacherConfig | None = None, pcfg: PretrainConfig | None = None):
    model, metrics = pretrain_teacher(teacher_tensors(train_scenes), teacher_tensors(val_scenes), tcfg, pcfg)
    return model.freeze(), metrics


def evaluate_student(student: StudentModel, items, teacher: TeacherModel | None = None, **meta) -> EvalReport:
    dataset = EvalDataset([s for _, s in items], source="synthetic")
    student.eval()
    preds = [answer_mcq(student, v, s, teacher) for v, s in items]
    return EvalReport.build(preds, dataset, model_hash=student.param_hash(), **meta)


def accuracy(student: StudentModel, items, teacher: TeacherModel | None = None) -> float:
    if not items:
        return float("nan")
    return float(np.mean([answer_mcq(student, v, s, teacher) == s.answer_index for v, s in items]))


@dataclass
class RunResult:
    student: StudentModel
    decoder: object
    report: object
    accuracy: float = float("nan")
    extra: dict = field(default_factory=dict)


def run_distill(dcfg: DistillConfig, scfg: StudentConfig, train_items, teacher: TeacherModel | None,
                cache: TeacherCache | None = None, test_items=None, prepared: PreparedData | None = None) -> RunResult:
    student = StudentModel(scfg)
    data = prepared if prepared is not None else prepare(train_items, student)
    student, d4dp, report = train(dcfg, data, teacher, student, cache)
    acc = accuracy(student, test_items, teacher) if test_items else float("nan")
    return RunResult(student, d4dp, report, acc)
