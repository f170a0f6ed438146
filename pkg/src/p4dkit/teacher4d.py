"""Frozen 4D perception teacher: a space-time video encoder and one pointwise decoder per modality."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .nnkit import Adam, gelu, smooth_l1, state_hash
from .nnkit.checkpoint import load_checkpoint, save_checkpoint
from .nnkit.layers import MLP, Block, LayerNorm, Linear
from .nnkit.trace import traced
from .scenegen import MODALITIES, MODALITY_CHANNELS, SignalSet, VideoTensor

log = logging.getLogger(__name__)

SECTION = "teacher4d"
DEFAULT_LAMBDAS = {"depth": 1.0, "flow": 0.1, "motion": 0.05, "camray": 0.05}


class ShapeError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, last_good: dict | None = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TeacherConfig:
    image_size: tuple[int, int] = (32, 32)
    n_frames: int = 8
    patch: int = 4
    temporal_stride: int = 2
    latent_dim: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    decoder_hidden: int = 32
    seed: int = 0

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        H, W = self.image_size
        return (self.n_frames // self.temporal_stride, H // self.patch, W // self.patch, self.latent_dim)

    def check_video_shape(self, n_frames: int, height: int, width: int) -> None:
        problems = []
        if height % self.patch or width % self.patch:
            ph = (-height) % self.patch
            pw = (-width) % self.patch
            problems.append(f"pad frames by {ph} rows and {pw} columns to reach a multiple of patch {self.patch}")
        if n_frames % self.temporal_stride:
            problems.append(f"pad {(-n_frames) % self.temporal_stride} frame(s) to reach a multiple of stride {self.temporal_stride}")
        if problems:
            raise ShapeError(f"video of shape ({n_frames}, {height}, {width}) not divisible: " + "; ".join(problems))
        if (n_frames, height, width) != (self.n_frames, *self.image_size):
            raise ShapeError(
                f"video shape ({n_frames}, {height}, {width}) differs from configured "
                f"({self.n_frames}, {self.image_size[0]}, {self.image_size[1]})"
            )


@dataclass
class TeacherLatent:
    values: torch.Tensor  # (N', h', w', c') or batched (B, N', h', w', c')
    video_id: str = ""
    teacher_hash: str = ""


def frames_tensor(videos) -> torch.Tensor:
    """Stack VideoTensor frames (or arrays) into a (B, N, H, W, 3) tensor of the default dtype."""
    if isinstance(videos, VideoTensor):
        videos = [videos]
    arr = np.stack([v.frames if isinstance(v, VideoTensor) else np.asarray(v) for v in videos])
    return torch.as_tensor(arr, dtype=torch.get_default_dtype())


class TeacherModel(nn.Module):
    def __init__(self, cfg: TeacherConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or TeacherConfig()
        if tuple(MODALITY_CHANNELS[m] for m in MODALITIES) != (1, 2, 1, 6):
            raise AssertionError("modality channel map must be depth/flow/motion/camray = 1/2/1/6")
        Np, hp, wp, c = cfg.latent_shape
        gen = torch.Generator().manual_seed(cfg.seed)
        self.embed = Linear(cfg.temporal_stride * cfg.patch * cfg.patch * 3, c, gen)
        self.pos = nn.Parameter(0.02 * torch.randn(Np * hp * wp, c, generator=gen, dtype=torch.float64).to(torch.get_default_dtype()))
        self.blocks = nn.ModuleList(Block(c, cfg.n_heads, gen, causal=False) for _ in range(cfg.n_blocks))
        self.ln = LayerNorm(c)
        self.decoders = nn.ModuleDict({m: MLP([c, cfg.decoder_hidden, MODALITY_CHANNELS[m]], gen) for m in MODALITIES})
        self.frozen = False
        self.frozen_hash: str | None = None

    def out_channels(self, m: str) -> int:
        return self.decoders[m].layers[-1].weight.shape[0]

    def _tubelets(self, frames: torch.Tensor) -> torch.Tensor:
        B, N, H, W, C = frames.shape
        self.cfg.check_video_shape(N, H, W)
        s, p = self.cfg.temporal_stride, self.cfg.patch
        x = frames.reshape(B, N // s, s, H // p, p, W // p, p, C)
        x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
        return x.reshape(B, (N // s) * (H // p) * (W // p), s * p * p * C)

    @traced("E_4D")
    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, N, H, W, 3) frames in [0, 1] -> (B, N', h', w', c') latent."""
        B = frames.shape[0]
        x = self.embed(self._tubelets(frames) - 0.5) + self.pos
        for blk in self.blocks:
            x = blk(x)
        x = self.ln(x)
        return x.reshape(B, *self.cfg.latent_shape)

    @traced("D_m")
    def decode(self, latent: torch.Tensor, m: str, repeat: bool = True) -> torch.Tensor:
        """(B, N', h', w', c') latent -> (B, N, H, W, ch(m)): bilinear upsampling in space,
        the pointwise head, then nearest-frame repeat in time (skipped with ``repeat=False``,
        which returns the N' distinct frames).

        The head's first layer is affine and bilinear weights sum to one, so it is applied
        before upsampling; the result equals upsample-then-MLP exactly.
        """
        if m not in self.decoders:
            raise KeyError(f"unknown modality {m!r}; expected one of {MODALITIES}")
        B, Np, hp, wp, c = latent.shape
        H, W = self.cfg.image_size
        first, *rest = self.decoders[m].layers
        x = latent @ first.weight.t()
        hid = x.shape[-1]
        x = x.reshape(B * Np, hp, wp, hid).permute(0, 3, 1, 2)
        x = F.interpolate(x, size=(H, W), mode="bilinear", align_corners=False)
        x = x.permute(0, 2, 3, 1) + first.bias
        for layer in rest:
            x = layer(gelu(x))
        x = x.reshape(B, Np, H, W, -1)
        if not repeat:
            return x
        return x.repeat_interleave(self.cfg.temporal_stride, dim=1)

    def decode_all(self, latent: torch.Tensor, modalities=MODALITIES) -> dict[str, torch.Tensor]:
        return {m: self.decode(latent, m) for m in modalities}

    def freeze(self) -> "TeacherModel":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.frozen_hash = state_hash(self)
        return self

    def param_hash(self) -> str:
        return state_hash(self)

    def save(self, path) -> str:
        tensors = {k: v for k, v in self.state_dict().items()}
        return save_checkpoint(path, SECTION, tensors)

    @classmethod
    def load(cls, path, cfg: TeacherConfig, freeze: bool = True) -> "TeacherModel":
        model = cls(cfg)
        state = load_checkpoint(path, SECTION)
        model.load_state_dict({k: torch.as_tensor(v, dtype=torch.get_default_dtype()) for k, v in state.items()})
        return model.freeze() if freeze else model


def teacher_encode(model: TeacherModel, video: VideoTensor) -> TeacherLatent:
    with torch.no_grad():
        lat = model.encode(frames_tensor(video))[0]
    return TeacherLatent(lat, video.video_id, model.frozen_hash or "")


def teacher_decode(model: TeacherModel, latent: TeacherLatent, m: str) -> torch.Tensor:
    with torch.no_grad():
        return model.decode(latent.values.unsqueeze(0), m)[0]


def freeze(model: TeacherModel) -> TeacherModel:
    return model.freeze()


def signals_tensor(signals: list[SignalSet]) -> dict[str, torch.Tensor]:
    dt = torch.get_default_dtype()
    return {m: torch.as_tensor(np.stack([getattr(s, m) for s in signals]), dtype=dt) for m in MODALITIES}


@dataclass
class PretrainConfig:
    steps: int = 2500
    batch_size: int = 8
    lr: float = 2e-3
    warmup_ratio: float = 0.03
    lambdas: dict = field(default_factory=lambda: dict(DEFAULT_LAMBDAS))
    delta: float = 1.0
    eval_every: int = 250
    seed: int = 0


def supervised_loss(model: TeacherModel, frames: torch.Tensor, targets: dict[str, torch.Tensor], lambdas, delta):
    latent = model.encode(frames)
    parts = {m: smooth_l1(model.decode(latent, m), targets[m], delta) for m in MODALITIES}
    total = sum(lambdas[m] * parts[m] for m in MODALITIES)
    return total, parts


@torch.no_grad()
def evaluate_teacher(model: TeacherModel, frames: torch.Tensor, targets: dict[str, torch.Tensor], lambdas=None,
                     delta: float = 1.0, batch_size: int = 32) -> dict[str, float]:
    lambdas = lambdas or DEFAULT_LAMBDAS
    sums = {m: 0.0 for m in MODALITIES}
    n = frames.shape[0]
    for i in range(0, n, batch_size):
        _, parts = supervised_loss(model, frames[i:i + batch_size], {m: t[i:i + batch_size] for m, t in targets.items()}, lambdas, delta)
        for m in MODALITIES:
            sums[m] += parts[m].item() * min(batch_size, n - i)
    out = {m: sums[m] / n for m in MODALITIES}
    out["total"] = sum(lambdas[m] * out[m] for m in MODALITIES)
    return out


def pretrain_teacher(train: tuple[torch.Tensor, dict], val: tuple[torch.Tensor, dict], cfg: TeacherConfig | None = None,
                     pcfg: PretrainConfig | None = None, model: TeacherModel | None = None):
    """Supervised Smooth-L1 regression of every modality on scenegen ground truth.

    ``train`` and ``val`` are ``(frames, targets)`` pairs as built by ``frames_tensor`` and
    ``signals_tensor``. Returns the model (not yet frozen) and a metrics dict with the
    initial and final validation losses plus the loss curve.
    """
    pcfg = pcfg or PretrainConfig()
    model = model or TeacherModel(cfg)
    frames, targets = train
    vframes, vtargets = val
    init = evaluate_teacher(model, vframes, vtargets, pcfg.lambdas, pcfg.delta)
    opt = Adam(model.parameters(), pcfg.lr, max(pcfg.steps, 1), pcfg.warmup_ratio)
    rng = np.random.default_rng(pcfg.seed)
    curve = []
    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    n = frames.shape[0]
    for step in range(pcfg.steps):
        if not opt.params:
            break
        idx = torch.as_tensor(rng.choice(n, size=min(pcfg.batch_size, n), replace=False))
        loss, parts = supervised_loss(model, frames[idx], {m: t[idx] for m, t in targets.items()}, pcfg.lambdas, pcfg.delta)
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            raise TrainingDiverged(f"teacher loss non-finite at step {step}", last_good)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(loss.item())
        if (step + 1) % pcfg.eval_every == 0:
            last_good = {k: v.clone() for k, v in model.state_dict().items()}
            log.info("teacher step %d loss %.4f", step + 1, float(np.mean(curve[-pcfg.eval_every:])))
    final = evaluate_teacher(model, vframes, vtargets, pcfg.lambdas, pcfg.delta)
    return model, {"init": init, "final": final, "curve": curve, "config": asdict(pcfg)}
