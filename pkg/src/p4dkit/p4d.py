"""Latent and explicit distillation from the frozen teacher into the student."""

from __future__ import annotations

import colorsys
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .nnkit import Adam, current_mode, smooth_l1_per_frame, state_hash
from .nnkit.checkpoint import load_checkpoint, save_checkpoint
from .nnkit.layers import MLP
from .nnkit.trace import count_invocations, traced
from .scenegen import MODALITIES, VideoTensor
from .scenegen.vqa import VQASample
from .student import (
    StudentModel,
    answer_mcq,
    encode_text,
    pad_batch,
    sft_loss,
    student_frames,
)
from .teacher4d import DEFAULT_LAMBDAS, TeacherModel, TrainingDiverged, frames_tensor

log = logging.getLogger(__name__)

CACHE_SECTION = "teacher-cache"
DECODER_SECTION = "d4dp"


class FrozenTeacherError(RuntimeError):
    pass


@dataclass
class DistillConfig:
    alpha: float = 0.5
    beta: float = 0.1
    lambdas: dict = field(default_factory=lambda: dict(DEFAULT_LAMBDAS))
    delta: float = 1.0
    enabled_modalities: tuple[str, ...] = MODALITIES
    use_ld: bool = True
    use_ed: bool = True
    trainable: tuple[str, ...] = ("E_P", "LLM")
    variant: str = "plain"
    decoder_hidden: int = 256
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    warmup_ratio: float = 0.03
    clip_norm: float | None = 1.0
    seed: int = 0
    log_every: int = 1

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0 or any(v < 0 for v in self.lambdas.values()):
            raise ValueError("alpha, beta and every lambda must be non-negative")
        if self.use_ed and not self.enabled_modalities:
            raise ValueError("explicit distillation needs at least one enabled modality")
        unknown = set(self.enabled_modalities) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")

    @property
    def needs_decoder(self) -> bool:
        return self.use_ld or self.use_ed


# -- D_4DP and the rearrangement -------------------------------------------------------

class PerceptionDecoder(nn.Module):
    """Training-only 3-layer MLP from LLM hidden width to the teacher latent width."""

    training_only = True

    def __init__(self, c_in: int, c_out: int, hidden: int = 256, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.mlp = MLP([c_in, hidden, hidden, c_out], gen)
        self.c_in, self.c_out = c_in, c_out

    @traced("D_4DP")
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.c_in:
            raise ValueError(f"decoder expects width {self.c_in}, got {x.shape[-1]}")
        return self.mlp(x)


def rearrange_hidden(hidden: torch.Tensor, target: tuple[int, int, int]) -> torch.Tensor:
    """(..., N, h, w, c) -> (..., N', h', w', c): frames 0, s, 2s, ... then bilinear resize."""
    Np, hp, wp = target
    N, h, w, c = hidden.shape[-4:]
    if Np <= 0 or N % Np:
        raise ValueError(f"cannot subsample {N} frames to {Np}: stride must be integral")
    lead = hidden.shape[:-4]
    x = hidden[..., :: N // Np, :, :, :]
    if (h, w) != (hp, wp):
        x = x.reshape(-1, h, w, c).permute(0, 3, 1, 2)
        x = F.interpolate(x, size=(hp, wp), mode="bilinear", align_corners=False)
        x = x.permute(0, 2, 3, 1).reshape(*lead, Np, hp, wp, c)
    return x


def decode_latent(d4dp: PerceptionDecoder, rearranged: torch.Tensor) -> torch.Tensor:
    return d4dp(rearranged)


def student_explicit(latent: torch.Tensor, teacher: TeacherModel, m: str, repeat: bool = True) -> torch.Tensor:
    """Decode a student latent with the teacher's own frozen head for modality ``m``."""
    if not teacher.frozen or any(p.requires_grad for p in teacher.parameters()):
        raise FrozenTeacherError("explicit distillation requires a frozen teacher")
    batched = latent.dim() == 5
    out = teacher.decode(latent if batched else latent.unsqueeze(0), m, repeat=repeat)
    return out if batched else out[0]


# -- losses -----------------------------------------------------------------------------

def _frame_sum(a: torch.Tensor, b: torch.Tensor, delta: float, frame_ndim: int) -> torch.Tensor:
    """Sum over frames of the per-frame mean Smooth-L1; batch axes (if any) are averaged."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == frame_ndim:
        return smooth_l1_per_frame(a, b, delta).sum()
    lead = a.shape[: a.dim() - frame_ndim]
    n_frames = a.shape[len(lead)]
    frames = smooth_l1_per_frame(a.reshape(-1, *a.shape[len(lead) + 1:]), b.reshape(-1, *b.shape[len(lead) + 1:]), delta)
    return frames.reshape(-1, n_frames).sum(dim=1).mean()


def latent_distill_loss(teacher_latent: torch.Tensor, student_latent: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Latent gap: frames are (N', h', w', c'); an optional leading batch axis is averaged."""
    return _frame_sum(teacher_latent, student_latent, delta, frame_ndim=4)


def explicit_distill_loss(P: dict[str, torch.Tensor], P_hat: dict[str, torch.Tensor], lambdas=None,
                          delta: float = 1.0, enabled=None, frame_weight: float = 1.0) -> torch.Tensor:
    """Sum over frames and enabled modalities of lambda_m times the per-frame Smooth-L1.

    ``frame_weight`` lets callers pass the N' distinct frames of a nearest-repeat decode
    and weight each by the repeat count, which equals the loss on all N frames.
    """
    if set(P) != set(P_hat):
        raise ValueError(f"modality sets differ: {sorted(P)} vs {sorted(P_hat)}")
    lambdas = DEFAULT_LAMBDAS if lambdas is None else lambdas
    enabled = tuple(P) if enabled is None else tuple(enabled)
    total = None
    for m in enabled:
        if m not in P:
            raise ValueError(f"enabled modality {m!r} missing from the signal maps")
        term = lambdas[m] * _frame_sum(P[m], P_hat[m], delta, frame_ndim=4)
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return frame_weight * total


def total_loss(sft, ld, ed, alpha: float = 0.5, beta: float = 0.1):
    for name, v in (("sft", sft), ("ld", ld), ("ed", ed)):
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite {name} loss component: {value}")
    return sft + alpha * ld + beta * ed


# -- teacher cache --------------------------------------------------------------------

class TeacherCache:
    """Teacher latents keyed by (video id, frozen teacher hash), optionally mirrored on disk."""

    def __init__(self, teacher: TeacherModel, directory: str | Path | None = None):
        if not teacher.frozen:
            raise FrozenTeacherError("teacher must be frozen before caching its outputs")
        self.teacher = teacher
        self.hash = teacher.frozen_hash
        self.dir = Path(directory) if directory else None
        self._mem: dict[tuple[str, str], torch.Tensor] = {}
        self._signals: dict[tuple[str, str], dict[str, torch.Tensor]] = {}

    def _path(self, video_id: str) -> Path:
        return self.dir / f"{video_id}.{self.hash[:16]}.ckpt"

    def latent(self, video: VideoTensor) -> torch.Tensor:
        key = (video.video_id, self.hash)
        if key in self._mem:
            return self._mem[key]
        dt = torch.get_default_dtype()
        if self.dir is not None and self._path(video.video_id).exists():
            lat = torch.as_tensor(load_checkpoint(self._path(video.video_id), CACHE_SECTION)["latent"], dtype=dt)
        else:
            with torch.no_grad():
                lat = self.teacher.encode(frames_tensor(video))[0]
            if self.dir is not None:
                self.dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(self._path(video.video_id), CACHE_SECTION, {"latent": lat})
        self._mem[key] = lat
        return lat

    def signals(self, video: VideoTensor) -> dict[str, torch.Tensor]:
        """Teacher maps at the N' distinct latent frames."""
        key = (video.video_id, self.hash)
        if key not in self._signals:
            lat = self.latent(video)
            with torch.no_grad():
                self._signals[key] = {m: self.teacher.decode(lat[None], m, repeat=False)[0] for m in MODALITIES}
        return self._signals[key]


# -- training -------------------------------------------------------------------------

@dataclass
class TrainReport:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)
    float_mode: str = "32"

    def column(self, key: str) -> np.ndarray:
        return np.array([s[key] for s in self.steps])

    def check_decomposition(self, rel_tol: float | None = None) -> float:
        """Recompute every logged total; the default tolerance is 1e-9 for 64-bit runs and a
        few float32 ulps otherwise, since the logged values are rounded to the run precision."""
        if rel_tol is None:
            rel_tol = 1e-9 if self.float_mode == "64" else 1e-6
        alpha, beta = self.config["alpha"], self.config["beta"]
        worst = 0.0
        for s in self.steps:
            recomputed = s["sft"] + alpha * s["ld"] + beta * s["ed"]
            err = abs(recomputed - s["total"]) / max(abs(s["total"]), 1e-30)
            worst = max(worst, err)
            if err > rel_tol:
                raise AssertionError(f"step {s['step']}: total {s['total']} != recomputed {recomputed}")
        return worst

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class PreparedData:
    frames: torch.Tensor
    timestamps: torch.Tensor
    seqs: list[list[int]]
    masks: list[list[int]]
    videos: list[VideoTensor]

    def __len__(self) -> int:
        return len(self.seqs)


def prepare(items: list[tuple[VideoTensor, VQASample]], student: StudentModel) -> PreparedData:
    dt = torch.get_default_dtype()
    frames = torch.as_tensor(np.stack([student_frames(v, s) for v, s in items]), dtype=dt)
    ts = torch.as_tensor(np.stack([np.asarray(s.timestamps) for _, s in items]), dtype=dt)
    seqs, masks = [], []
    for _, s in items:
        ids, mask = encode_text(student.tokenizer, s.question, s.options[s.answer_index])
        seqs.append(ids)
        masks.append(mask)
    return PreparedData(frames, ts, seqs, masks, [v for v, _ in items])


def distill_step_losses(cfg: DistillConfig, data: PreparedData, idx, student: StudentModel,
                        d4dp: PerceptionDecoder | None, teacher: TeacherModel | None, cache: TeacherCache | None):
    """SFT, LD and ED losses on one batch (the distillation terms use the same samples)."""
    idx = list(idx)
    ids, mask = pad_batch([data.seqs[i] for i in idx], [data.masks[i] for i in idx], student.tokenizer.pad_id)
    latent_in = None
    if student.needs_teacher:
        latent_in = torch.stack([cache.latent(data.videos[i]) for i in idx])
    visual = student.visual_embeddings(data.frames[idx], data.timestamps[idx], latent_in)
    sft, hidden = sft_loss(student, visual, ids, mask)
    zero = torch.zeros((), dtype=sft.dtype)
    ld, ed = zero, zero
    if cfg.needs_decoder:
        Np, hp, wp, _ = teacher.cfg.latent_shape
        f_hat = d4dp(rearrange_hidden(hidden, (Np, hp, wp)))
        if cfg.use_ld:
            f = torch.stack([cache.latent(data.videos[i]) for i in idx])
            ld = latent_distill_loss(f, f_hat, cfg.delta)
        if cfg.use_ed:
            mods = tuple(cfg.enabled_modalities)
            P = {m: torch.stack([cache.signals(data.videos[i])[m] for i in idx]) for m in mods}
            P_hat = {m: student_explicit(f_hat, teacher, m, repeat=False) for m in mods}
            ed = explicit_distill_loss(P, P_hat, cfg.lambdas, cfg.delta, mods, frame_weight=teacher.cfg.temporal_stride)
    return sft, ld, ed


def train(cfg: DistillConfig, items, teacher: TeacherModel | None, student: StudentModel,
          cache: TeacherCache | None = None, eval_fn=None, eval_every: int = 0):
    """End-to-end training of the student with the SFT, latent and explicit objectives.

    Returns ``(student, d4dp, report)``; ``d4dp`` is None when neither distillation
    term is active, in which case no decoder is ever built.
    """
    cfg.validate()
    if cfg.variant != student.cfg.variant:
        raise ValueError(f"config variant {cfg.variant!r} does not match student variant {student.cfg.variant!r}")
    uses_teacher = cfg.needs_decoder or student.needs_teacher
    if uses_teacher:
        if teacher is None:
            raise ValueError("this configuration needs the teacher")
        if not teacher.frozen:
            raise FrozenTeacherError("distillation requires a frozen teacher")
        cache = cache or TeacherCache(teacher)
    teacher_before = teacher.param_hash() if teacher is not None else ""
    data = items if isinstance(items, PreparedData) else prepare(items, student)

    student.set_trainable(cfg.trainable)
    d4dp = None
    params = [p for p in student.parameters() if p.requires_grad]
    if cfg.needs_decoder:
        d4dp = PerceptionDecoder(student.cfg.d_model, teacher.cfg.latent_dim, cfg.decoder_hidden, seed=cfg.seed + 1)
        params += list(d4dp.parameters())
    opt = Adam(params, cfg.lr, max(cfg.steps, 1), cfg.warmup_ratio, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(seed=cfg.seed, config=asdict(cfg), float_mode=current_mode())

    def snapshot():
        state = {"student": {k: v.clone() for k, v in student.state_dict().items()}}
        if d4dp is not None:
            state["d4dp"] = {k: v.clone() for k, v in d4dp.state_dict().items()}
        return state

    last_good = snapshot()
    n = len(data)
    for step in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        sft, ld, ed = distill_step_losses(cfg, data, idx, student, d4dp, teacher, cache)
        try:
            total = total_loss(sft, ld, ed, cfg.alpha if cfg.use_ld else 0.0, cfg.beta if cfg.use_ed else 0.0)
        except FloatingPointError as exc:
            student.load_state_dict(last_good["student"])
            if d4dp is not None:
                d4dp.load_state_dict(last_good["d4dp"])
            raise TrainingDiverged(f"step {step}: {exc}", last_good) from exc
        opt.zero_grad()
        if params:
            total.backward()
            lr = opt.step()
        else:
            lr = 0.0
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            report.steps.append({
                "step": step, "sft": sft.item(), "ld": ld.item(), "ed": ed.item(),
                "total": total.item(), "lr": lr,
            })
        if eval_fn is not None and eval_every and (step + 1) % eval_every == 0:
            report.evals.append({"step": step + 1, **eval_fn(student)})
            last_good = snapshot()
    # logged totals use the effective weights, so record those for the recompute check
    report.config["alpha"] = cfg.alpha if cfg.use_ld else 0.0
    report.config["beta"] = cfg.beta if cfg.use_ed else 0.0
    report.hashes = {
        "teacher_before": teacher_before,
        "teacher_after": teacher.param_hash() if teacher is not None else "",
        "student": student.param_hash(),
        "d4dp": state_hash(d4dp) if d4dp is not None else "",
    }
    if teacher is not None and report.hashes["teacher_before"] != report.hashes["teacher_after"]:
        raise FrozenTeacherError("teacher parameters changed during distillation")
    return student, d4dp, report


def save_decoder(d4dp: PerceptionDecoder, path) -> str:
    return save_checkpoint(path, DECODER_SECTION, dict(d4dp.state_dict()))


# -- inference-side checks ------------------------------------------------------------

def inference_trace(student: StudentModel, video: VideoTensor, sample: VQASample, teacher: TeacherModel | None = None):
    """Answer one question and count invocations of the teacher and training-only modules."""
    with count_invocations() as counts:
        answer = answer_mcq(student, video, sample, teacher)
    return {k: counts.get(k, 0) for k in ("D_4DP", "D_m", "E_4D")}, answer


# -- qualitative snapshots ------------------------------------------------------------

def _normalize(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-12:
        return np.zeros_like(x, dtype=np.uint8)
    return np.round((x - lo) / (hi - lo) * 255.0).astype(np.uint8)


def render_modality(maps: np.ndarray, m: str) -> np.ndarray:
    """(N, H, W, ch) maps -> uint8 image strip (H, N*W) for grey or (H, N*W, 3) for colour."""
    maps = np.asarray(maps, dtype=np.float64)
    if m not in MODALITIES:
        raise KeyError(f"unknown modality {m!r}")
    strip = np.concatenate(list(maps), axis=1)
    if m == "depth":
        return _normalize(strip[..., 0])
    if m == "motion":
        return np.where(strip[..., 0] >= 0.5, 255, 0).astype(np.uint8)
    if m == "camray":
        return np.round((np.clip(strip[..., :3], -1, 1) + 1.0) * 127.5).astype(np.uint8)
    # flow: hue from direction, brightness from magnitude
    u, v = strip[..., 0], strip[..., 1]
    mag = np.hypot(u, v)
    scale = mag.max() if mag.max() > 0 else 1.0
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    rgb = np.array([colorsys.hsv_to_rgb(h, 1.0, s) for h, s in zip(hue.ravel(), (mag / scale).ravel())])
    return np.round(rgb.reshape(*u.shape, 3) * 255).astype(np.uint8)


def write_netpbm(path, image: np.ndarray) -> Path:
    """Binary PGM for 2-D arrays, PPM for (H, W, 3)."""
    path = Path(path)
    image = np.asarray(image, dtype=np.uint8)
    magic = b"P5" if image.ndim == 2 else b"P6"
    H, W = image.shape[:2]
    path.write_bytes(magic + f"\n{W} {H}\n255\n".encode() + image.tobytes())
    return path


def read_netpbm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, payload = data.split(b"\n", 3)
    W, H = (int(v) for v in dims.split())
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(H, W) if magic == b"P5" else arr.reshape(H, W, 3)


@torch.no_grad()
def student_signal_maps(student: StudentModel, d4dp: PerceptionDecoder, teacher: TeacherModel,
                        video: VideoTensor, sample: VQASample, m: str) -> np.ndarray:
    dt = torch.get_default_dtype()
    frames = torch.as_tensor(student_frames(video, sample), dtype=dt)[None]
    ts = torch.as_tensor(np.asarray(sample.timestamps), dtype=dt)[None]
    latent_in = teacher.encode(frames_tensor(video)) if student.needs_teacher else None
    visual = student.visual_embeddings(frames, ts, latent_in)
    ids, _ = encode_text(student.tokenizer, sample.question, None)
    _, hidden = student.llm_forward(visual, torch.as_tensor([ids]))
    Np, hp, wp, _ = teacher.cfg.latent_shape
    f_hat = d4dp(rearrange_hidden(hidden, (Np, hp, wp)))
    return student_explicit(f_hat, teacher, m)[0].numpy()


def snapshot_explicit(student, d4dp, teacher, video, sample, m: str, out_dir, step_tag: str) -> Path:
    if m not in MODALITIES:
        raise KeyError(f"unknown modality {m!r}")
    maps = student_signal_maps(student, d4dp, teacher, video, sample, m)
    ext = "pgm" if m in ("depth", "motion") else "ppm"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return write_netpbm(out / f"{video.video_id}_{m}_{step_tag}.{ext}", render_modality(maps, m))


def snapshot_teacher(teacher: TeacherModel, video: VideoTensor, m: str, out_dir, step_tag: str = "teacher") -> Path:
    with torch.no_grad():
        maps = teacher.decode(teacher.encode(frames_tensor(video)), m)[0].numpy()
    ext = "pgm" if m in ("depth", "motion") else "ppm"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return write_netpbm(out / f"{video.video_id}_{m}_{step_tag}.{ext}", render_modality(maps, m))


# -- ablation matrix --------------------------------------------------------------------

ABLATION_ROWS: dict[str, dict] = {
    "Zero-shot": {"steps": 0, "use_ld": False, "use_ed": False},
    "4D-SFT": {"use_ld": False, "use_ed": False},
    "LD-Only": {"use_ld": True, "use_ed": False},
    "LD+D": {"use_ld": True, "use_ed": True, "enabled_modalities": ("depth",)},
    "LD+D+F": {"use_ld": True, "use_ed": True, "enabled_modalities": ("depth", "flow")},
    "LD+D+F+M": {"use_ld": True, "use_ed": True, "enabled_modalities": ("depth", "flow", "motion")},
    "ED-Only": {"use_ld": False, "use_ed": True},
    "LD+ED": {"use_ld": True, "use_ed": True},
    "4D-Concat": {"use_ld": False, "use_ed": False, "variant": "concat4d"},
    "4D-PE": {"use_ld": False, "use_ed": False, "variant": "pe4d"},
    "Tune-V": {"trainable": ("E_V",)},
    "Tune-P": {"trainable": ("E_P",)},
    "Tune-LLM": {"trainable": ("LLM",)},
    "Tune-All": {"trainable": ("E_V", "E_P", "LLM")},
    "Tune-P+LLM": {"trainable": ("E_P", "LLM")},
}


def ablation_config(row: str, base: DistillConfig | None = None, **overrides) -> DistillConfig:
    if row not in ABLATION_ROWS:
        raise KeyError(f"unknown ablation row {row!r}; expected one of {list(ABLATION_ROWS)}")
    # the row's own settings are applied last, so a shared steps/seed override keeps Zero-shot untrained
    base = replace(base or DistillConfig(), **overrides)
    return replace(base, **ABLATION_ROWS[row])
