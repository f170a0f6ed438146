"""Quick self-checks behind ``p4d verify``: constants, closed-form oracles and the scene geometry."""

from __future__ import annotations

import traceback

import numpy as np
import torch

from .nnkit import float_mode, grad_check, sinusoidal_encoding, smooth_l1
from .p4d import DistillConfig, PerceptionDecoder, explicit_distill_loss, latent_distill_loss, total_loss
from .scenegen import MODALITY_CHANNELS, generate_scene, sample_scene_spec
from .scenegen.geometry import project
from .evalkit import EvalDataset, random_baseline
from .scenegen.vqa import VQASample


def check_constants():
    d = DistillConfig()
    assert (d.alpha, d.beta) == (0.5, 0.1)
    assert d.lambdas == {"depth": 1.0, "flow": 0.1, "motion": 0.05, "camray": 0.05}
    assert tuple(MODALITY_CHANNELS.values()) == (1, 2, 1, 6)
    dec = PerceptionDecoder(8, 4, 16)
    assert len(dec.mlp.layers) == 3
    assert all(float(l.bias.abs().max()) == 0.0 for l in dec.mlp.layers)
    return "loss weights, channel map and decoder structure"


def check_losses():
    with float_mode("64"):
        assert abs(smooth_l1(torch.tensor([0.5]), torch.tensor([0.0])).item() - 0.125) < 1e-12
        assert abs(smooth_l1(torch.tensor([2.0]), torch.tensor([0.0])).item() - 1.5) < 1e-12
        f = torch.zeros(1, 2, 2, 3)
        assert abs(latent_distill_loss(f, f + 1.0).item() - 0.5) < 1e-12
        ones = {m: torch.zeros(1, 2, 2, c) for m, c in MODALITY_CHANNELS.items()}
        shifted = {m: torch.full((1, 2, 2, c), 1.5) for m, c in MODALITY_CHANNELS.items()}
        # an offset of 1.5 gives a unit Smooth-L1 in every modality
        assert abs(explicit_distill_loss(ones, shifted).item() - 1.2) < 1e-12
        assert abs(float(total_loss(1.0, 2.0, 3.0)) - 2.3) < 1e-12
        p = sinusoidal_encoding(torch.tensor([0.0]), 8)[0]
        assert torch.equal(p, torch.tensor([0.0, 1.0] * 4, dtype=p.dtype))
    return "smooth_l1, latent, explicit and total losses, timestamp encoding"


def check_gradients():
    with float_mode("64"):
        dec = PerceptionDecoder(6, 5, 7, seed=3)
        x = torch.randn(4, 6, generator=torch.Generator().manual_seed(1))
        target = torch.randn(4, 5, generator=torch.Generator().manual_seed(2))
        res = grad_check(lambda: smooth_l1(dec(x), target), dict(dec.named_parameters()), samples_per_param=4)
    assert res.max_rel_error < 1e-4, res
    return f"decoder max relative error {res.max_rel_error:.2e}"


def check_flow_oracle():
    worst = 0.0
    for seed in range(10):
        spec = sample_scene_spec(seed)
        _, sig, meta = generate_scene(spec)
        K, dt = spec.camera.K, 1.0 / spec.fps
        for n in range(spec.n_frames - 1):
            ids = meta.id_maps[n]
            rows, cols = np.nonzero(ids >= 0)
            if rows.size == 0:
                continue
            k = ids[rows, cols]
            depth = sig.depth[n, rows, cols, 0]
            R, t = spec.camera.rotations[n], spec.camera.translations[n]
            rays = np.linalg.inv(K) @ np.stack([cols, rows, np.ones_like(rows)]).astype(float)
            X_cam = rays * depth
            X = R.T @ (X_cam - t[:, None])
            X_next = X + meta.velocities[k].T * dt
            uv, _ = project(K, spec.camera.rotations[n + 1], spec.camera.translations[n + 1], X_next.T)
            expected = uv - np.stack([cols, rows], axis=1)
            worst = max(worst, float(np.abs(expected - sig.flow[n, rows, cols]).max()))
    assert worst < 1e-6, worst
    return f"object-pixel flow vs projection difference, max deviation {worst:.1e}"


def check_camray():
    _, sig, meta = generate_scene(sample_scene_spec(0))
    d = sig.camray[..., :3]
    assert np.allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-9)
    return "unit directions"


def check_random_baseline():
    five = EvalDataset([VQASample("v", [0.0, 1.0], f"q{i}", list("abcde"), 0, {}, "VG", "static") for i in range(10)])
    four = EvalDataset([VQASample("v", [0.0, 1.0], f"q{i}", list("abcd"), 0, {}, "R", "dynamic") for i in range(10)])
    assert random_baseline(five)["overall"] == 0.2
    assert random_baseline(four)["overall"] == 0.25
    return "analytic 0.200 / 0.250"


CHECKS = [
    ("constants", check_constants),
    ("losses", check_losses),
    ("gradients", check_gradients),
    ("flow-oracle", check_flow_oracle),
    ("camray", check_camray),
    ("random-baseline", check_random_baseline),
]


def run_checks() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS:
        try:
            out.append((name, True, fn()))
        except Exception as exc:  # noqa: BLE001 - every failure is reported, none aborts the suite
            out.append((name, False, f"{type(exc).__name__}: {exc}".strip() or traceback.format_exc(limit=1)))
    return out
