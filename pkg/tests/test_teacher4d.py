from pathlib import Path

import numpy as np
import pytest
import torch

from p4dkit.nnkit import state_hash
from p4dkit.pipeline import build_scenes, fit_teacher, teacher_tensors
from p4dkit.scenegen import MODALITY_CHANNELS
from p4dkit.teacher4d import (
    PretrainConfig,
    ShapeError,
    TeacherConfig,
    TeacherLatent,
    TeacherModel,
    TrainingDiverged,
    evaluate_teacher,
    freeze,
    frames_tensor,
    pretrain_teacher,
    teacher_decode,
    teacher_encode,
)

FIXTURE = Path(__file__).parent / "data" / "teacher.ckpt"


@pytest.fixture(scope="module")
def scenes():
    return build_scenes(range(4))


@pytest.fixture(scope="module")
def small_teacher():
    return TeacherModel(TeacherConfig(patch=8)).freeze()


def test_latent_shape_patch8(scenes, small_teacher):
    lat = teacher_encode(small_teacher, scenes[0].video)
    assert isinstance(lat, TeacherLatent)
    assert tuple(lat.values.shape) == (4, 4, 4, 64)
    assert lat.video_id == scenes[0].video.video_id
    assert lat.teacher_hash == small_teacher.frozen_hash


def test_default_latent_shape():
    assert TeacherConfig().latent_shape == (4, 8, 8, 64)


def test_encode_deterministic(scenes, small_teacher):
    a = teacher_encode(small_teacher, scenes[0].video).values
    b = teacher_encode(small_teacher, scenes[0].video).values
    assert torch.equal(a, b)


def test_encode_sensitive_to_one_frame(scenes, small_teacher):
    frames = frames_tensor(scenes[0].video)
    changed = frames.clone()
    changed[0, 5] = 1.0 - changed[0, 5]
    with torch.no_grad():
        assert not torch.equal(small_teacher.encode(frames), small_teacher.encode(changed))


@pytest.mark.parametrize("shape, hint", [((8, 30, 32), "pad frames by 2 rows"), ((7, 32, 32), "pad 1 frame")])
def test_indivisible_shapes_rejected(shape, hint):
    model = TeacherModel(TeacherConfig(patch=8))
    with pytest.raises(ShapeError, match=hint):
        model.encode(torch.zeros(1, *shape, 3))


def test_decode_channels(scenes, small_teacher):
    lat = teacher_encode(small_teacher, scenes[0].video)
    for m, ch in MODALITY_CHANNELS.items():
        out = teacher_decode(small_teacher, lat, m)
        assert tuple(out.shape) == (8, 32, 32, ch)
    assert small_teacher.out_channels("depth") == 1
    assert small_teacher.out_channels("camray") == 6


def test_decode_unknown_modality(small_teacher):
    with pytest.raises(KeyError, match="normals"):
        small_teacher.decode(torch.zeros(1, 4, 4, 4, 64), "normals")


def test_zero_latent_zero_final_layer_gives_bias():
    model = TeacherModel(TeacherConfig(patch=8))
    last = model.decoders["flow"].layers[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.copy_(torch.tensor([0.25, -1.5]))
        out = model.decode(torch.zeros(1, 4, 4, 4, 64), "flow")
    assert torch.equal(out, torch.tensor([0.25, -1.5]).expand_as(out))


def test_decode_equals_upsample_then_mlp(f64):
    """Applying the first affine layer before the bilinear resize matches the textbook order."""
    model = TeacherModel(TeacherConfig(patch=8))
    lat = torch.randn(2, 4, 4, 4, 64, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        fast = model.decode(lat, "camray", repeat=False)
        up = torch.nn.functional.interpolate(lat.reshape(8, 4, 4, 64).permute(0, 3, 1, 2), size=(32, 32),
                                             mode="bilinear", align_corners=False)
        ref = model.decoders["camray"](up.permute(0, 2, 3, 1)).reshape(2, 4, 32, 32, 6)
    assert torch.allclose(fast, ref, atol=1e-12)


def test_temporal_repeat_is_nearest_frame(small_teacher):
    lat = torch.randn(1, 4, 4, 4, 64, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        full = small_teacher.decode(lat, "depth")
        distinct = small_teacher.decode(lat, "depth", repeat=False)
    assert full.shape[1] == 8 and distinct.shape[1] == 4
    for n in range(8):
        assert torch.equal(full[:, n], distinct[:, n // 2])


def test_channel_map_asserted(monkeypatch):
    import p4dkit.teacher4d as t4d

    monkeypatch.setitem(t4d.MODALITY_CHANNELS, "flow", 3)
    with pytest.raises(AssertionError, match="1/2/1/6"):
        TeacherModel(TeacherConfig(patch=8))


def test_freeze_idempotent_and_hash():
    model = TeacherModel(TeacherConfig(patch=8))
    h = state_hash(model)
    freeze(model)
    assert model.frozen and model.frozen_hash == h
    assert all(not p.requires_grad for p in model.parameters())
    freeze(model)
    assert model.frozen_hash == h


def test_zero_steps_keeps_init_loss(scenes):
    data = teacher_tensors(scenes)
    model, metrics = pretrain_teacher(data, data, TeacherConfig(patch=8), PretrainConfig(steps=0))
    assert metrics["final"] == metrics["init"]


def test_frozen_model_ignores_updates(scenes):
    data = teacher_tensors(scenes)
    model = TeacherModel(TeacherConfig(patch=8)).freeze()
    before = model.param_hash()
    pretrain_teacher(data, data, pcfg=PretrainConfig(steps=3, batch_size=2), model=model)
    assert model.param_hash() == before


def test_divergence_restores_last_good(scenes):
    frames, targets = teacher_tensors(scenes)
    bad = {m: t.clone() for m, t in targets.items()}
    bad["depth"][:] = float("nan")
    model = TeacherModel(TeacherConfig(patch=8))
    start = model.param_hash()
    with pytest.raises(TrainingDiverged) as info:
        pretrain_teacher((frames, bad), (frames, targets), pcfg=PretrainConfig(steps=5, batch_size=2), model=model)
    assert info.value.last_good is not None
    assert model.param_hash() == start


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_short_pretraining_lowers_depth_loss(seed):
    train = build_scenes(range(100 * seed, 100 * seed + 24))
    val = build_scenes(range(5000 + seed * 10, 5000 + seed * 10 + 8))
    cfg = TeacherConfig(patch=8, seed=seed)
    _, metrics = fit_teacher(train, val, cfg, PretrainConfig(steps=60, batch_size=4, seed=seed))
    assert metrics["final"]["depth"] < metrics["init"]["depth"]


def test_checkpoint_roundtrip(tmp_path, small_teacher):
    path = tmp_path / "t.ckpt"
    small_teacher.save(path)
    loaded = TeacherModel.load(path, small_teacher.cfg)
    assert loaded.frozen and loaded.frozen_hash == small_teacher.frozen_hash


def test_fixture_teacher_meets_depth_target():
    teacher = TeacherModel.load(FIXTURE, TeacherConfig())
    val = build_scenes(range(10000, 10064))
    metrics = evaluate_teacher(teacher, *teacher_tensors(val))
    assert metrics["depth"] < 0.15


@pytest.mark.slow
def test_pretraining_reaches_depth_target():
    """Full default recipe from scratch (about ten minutes on one core)."""
    train = build_scenes(range(800))
    val = build_scenes(range(10000, 10064))
    _, metrics = fit_teacher(train, val)
    assert metrics["final"]["depth"] < 0.15
    assert np.isfinite(metrics["final"]["total"])
