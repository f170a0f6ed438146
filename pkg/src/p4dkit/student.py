"""Toy multimodal student: patch encoder, timestamp encoding, projector, causal LM and output head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .nnkit import gelu, sinusoidal_encoding, state_hash
from .nnkit.checkpoint import load_checkpoint, save_checkpoint
from .nnkit.layers import Block, LayerNorm, Linear
from .scenegen import VideoTensor, overlay_regions
from .scenegen.vqa import VQASample
from .tokenizer import Tokenizer

SECTION = "student"
VARIANTS = ("plain", "concat4d", "pe4d")
MODULE_PREFIXES = {"E_V": "ev.", "E_P": "ep.", "LLM": "llm."}


class ContextLengthError(ValueError):
    pass


@dataclass
class StudentConfig:
    image_size: tuple[int, int] = (32, 32)
    n_frames: int = 8
    patch: int = 8
    vis_dim: int = 64
    pool: int = 1
    proj_hidden: int = 128
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_text: int = 40
    tpe: bool = True
    tpe_timescale: float = 10_000.0
    variant: str = "plain"
    hidden_block: int = -1
    latent_dim: int = 64
    seed: int = 0

    @property
    def vis_grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch, self.image_size[1] // self.patch

    @property
    def token_grid(self) -> tuple[int, int]:
        h, w = self.vis_grid
        return h // self.pool, w // self.pool

    @property
    def tokens_per_frame(self) -> int:
        h, w = self.token_grid
        return h * w

    @property
    def max_len(self) -> int:
        return 1 + self.n_frames * self.tokens_per_frame + self.max_text


class VisionEncoder(nn.Module):
    def __init__(self, cfg: StudentConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch * cfg.patch * 3, cfg.vis_dim, gen)
        h, w = cfg.vis_grid
        self.pos = nn.Parameter(0.1 * torch.randn(h, w, cfg.vis_dim, generator=gen, dtype=torch.float64).to(torch.get_default_dtype()))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        B, N, H, W, C = frames.shape
        if (H, W) != tuple(self.cfg.image_size):
            raise ValueError(f"frame size {(H, W)} does not match configured {tuple(self.cfg.image_size)}")
        p = self.cfg.patch
        x = frames.reshape(B, N, H // p, p, W // p, p, C).permute(0, 1, 2, 4, 3, 5, 6)
        x = x.reshape(B, N, H // p, W // p, p * p * C)
        return self.patch_embed(x - 0.5) + self.pos


class Projector(nn.Module):
    def __init__(self, cfg: StudentConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.fc1 = Linear(cfg.vis_dim, cfg.proj_hidden, gen)
        self.fc2 = Linear(cfg.proj_hidden, cfg.d_model, gen)
        # variant extensions start at zero so the plain path is reproduced exactly
        if cfg.variant == "concat4d":
            self.concat_ext = Linear(cfg.latent_dim, cfg.proj_hidden, gen, bias=False, zero=True)
        elif cfg.variant == "pe4d":
            self.pe_proj = Linear(cfg.latent_dim, cfg.d_model, gen, bias=False, zero=True)

    def pool(self, x: torch.Tensor) -> torch.Tensor:
        s = self.cfg.pool
        if s == 1:
            return x
        B, N, h, w, c = x.shape
        if h % s or w % s:
            raise ValueError(f"grid {h}x{w} not divisible by pooling {s}")
        return x.reshape(B, N, h // s, s, w // s, s, c).mean(dim=(3, 5))

    def forward(self, feats: torch.Tensor, latent: torch.Tensor | None = None) -> torch.Tensor:
        pre = self.fc1(self.pool(feats))
        if self.cfg.variant == "concat4d":
            pre = pre + self.concat_ext(self.pool(align_latent(latent, feats.shape[1], feats.shape[2:4])))
        out = self.fc2(gelu(pre))
        if self.cfg.variant == "pe4d":
            out = out + self.pe_proj(align_latent(latent, out.shape[1], out.shape[2:4]))
        return out


def align_latent(latent: torch.Tensor | None, n_frames: int, grid) -> torch.Tensor:
    """Teacher latent (B, N', h', w', c') -> (B, N, h, w, c'): nearest-frame repeat, bilinear resize."""
    if latent is None:
        raise ValueError("this variant needs the teacher latent at inference")
    B, Np, hp, wp, c = latent.shape
    if n_frames % Np:
        raise ValueError(f"cannot align {Np} latent frames to {n_frames} video frames")
    x = latent.repeat_interleave(n_frames // Np, dim=1)
    h, w = int(grid[0]), int(grid[1])
    if (h, w) != (hp, wp):
        x = x.reshape(B * n_frames, hp, wp, c).permute(0, 3, 1, 2)
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        x = x.permute(0, 2, 3, 1).reshape(B, n_frames, h, w, c)
    return x


class LanguageModel(nn.Module):
    def __init__(self, cfg: StudentConfig, vocab_size: int, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok = nn.Parameter(0.1 * torch.randn(vocab_size, d, generator=gen, dtype=torch.float64).to(torch.get_default_dtype()))
        self.pos = nn.Parameter(0.02 * torch.randn(cfg.max_len, d, generator=gen, dtype=torch.float64).to(torch.get_default_dtype()))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, gen, causal=True) for _ in range(cfg.n_layers))
        self.ln = LayerNorm(d)
        self.head = Linear(d, vocab_size, gen)


class StudentModel(nn.Module):
    def __init__(self, cfg: StudentConfig, tokenizer: Tokenizer | None = None):
        super().__init__()
        if cfg.variant not in VARIANTS:
            raise ValueError(f"unknown variant {cfg.variant!r}")
        if cfg.tpe and cfg.vis_dim % 2:
            raise ValueError("timestamp encoding needs an even feature width")
        self.cfg = cfg
        self.tokenizer = tokenizer or Tokenizer()
        gen = torch.Generator().manual_seed(cfg.seed)
        self.ev = VisionEncoder(cfg, gen)
        self.ep = Projector(cfg, gen)
        self.llm = LanguageModel(cfg, len(self.tokenizer), gen)

    @property
    def needs_teacher(self) -> bool:
        return self.cfg.variant != "plain"

    # -- vision side -------------------------------------------------------------
    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        return self.ev(frames)

    def add_tpe(self, feats: torch.Tensor, timestamps: torch.Tensor) -> torch.Tensor:
        if not self.cfg.tpe:
            return feats
        if timestamps.shape != feats.shape[:2]:
            raise ValueError(f"need one timestamp per frame: got {tuple(timestamps.shape)} for {tuple(feats.shape[:2])}")
        enc = sinusoidal_encoding(timestamps, feats.shape[-1], self.cfg.tpe_timescale, dtype=feats.dtype)
        return feats + enc[:, :, None, None, :]

    def project(self, feats: torch.Tensor, latent: torch.Tensor | None = None) -> torch.Tensor:
        return self.ep(feats, latent)

    def visual_embeddings(self, frames, timestamps, latent=None) -> torch.Tensor:
        feats = self.add_tpe(self.encode_frames(frames), timestamps)
        return self.project(feats, latent)

    # -- language side -----------------------------------------------------------
    def llm_forward(self, visual: torch.Tensor, text_ids: torch.Tensor, hidden_block: int | None = None):
        """Return next-token logits over the whole sequence and per-frame hidden grids.

        Sequence layout: ``<bos>``, all visual tokens frame by frame, then ``text_ids``.
        """
        B, N, h, w, d = visual.shape
        V = N * h * w
        L = 1 + V + text_ids.shape[1]
        if L > self.cfg.max_len:
            raise ContextLengthError(f"sequence of {L} tokens exceeds context {self.cfg.max_len}")
        llm = self.llm
        bos = llm.tok[self.tokenizer.id("<bos>")].expand(B, 1, d)
        x = torch.cat([bos, visual.reshape(B, V, d), llm.tok[text_ids]], dim=1) + llm.pos[:L]
        k = self.cfg.hidden_block if hidden_block is None else hidden_block
        k = k % len(llm.blocks)
        hidden = None
        for i, blk in enumerate(llm.blocks):
            x = blk(x)
            if i == k:
                hidden = x[:, 1:1 + V].reshape(B, N, h, w, d)
        logits = llm.head(llm.ln(x))
        return logits, hidden

    def param_groups(self) -> dict[str, list[str]]:
        groups = {k: [] for k in MODULE_PREFIXES}
        for name, _ in self.named_parameters():
            for g, prefix in MODULE_PREFIXES.items():
                if name.startswith(prefix):
                    groups[g].append(name)
        return groups

    def set_trainable(self, modules) -> None:
        modules = set(modules)
        unknown = modules - set(MODULE_PREFIXES)
        if unknown:
            raise ValueError(f"unknown modules {sorted(unknown)}")
        for name, p in self.named_parameters():
            p.requires_grad_(any(name.startswith(MODULE_PREFIXES[m]) for m in modules))

    def param_hash(self) -> str:
        return state_hash(self)

    def save(self, path) -> str:
        return save_checkpoint(path, SECTION, dict(self.state_dict()))

    @classmethod
    def load(cls, path, cfg: StudentConfig, tokenizer: Tokenizer | None = None) -> "StudentModel":
        model = cls(cfg, tokenizer)
        state = load_checkpoint(path, SECTION)
        model.load_state_dict({k: torch.as_tensor(v, dtype=torch.get_default_dtype()) for k, v in state.items()})
        return model

    def config_record(self) -> dict:
        return asdict(self.cfg)


# -- data plumbing ----------------------------------------------------------------

def student_frames(video: VideoTensor, sample: VQASample | None) -> np.ndarray:
    """Frames as the student sees them: region overlays drawn on the first frame only."""
    frames = np.array(video.frames, copy=True)
    if sample is not None and sample.regions:
        frames[0] = overlay_regions(frames[0], sample.regions)
    return frames


def encode_text(tok: Tokenizer, question: str, answer: str | None) -> tuple[list[int], list[int]]:
    """Token ids for ``question <ans> answer <eos>`` and a mask marking the answer tokens."""
    q = tok.encode(question) + [tok.id("<ans>")]
    if answer is None:
        return q, [0] * len(q)
    a = tok.encode(answer) + [tok.eos_id]
    return q + a, [0] * len(q) + [1] * len(a)


def pad_batch(seqs: list[list[int]], masks: list[list[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    T = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    m = torch.zeros((len(seqs), T))
    for i, (s, mk) in enumerate(zip(seqs, masks)):
        ids[i, : len(s)] = torch.as_tensor(s)
        m[i, : len(mk)] = torch.as_tensor(mk, dtype=m.dtype)
    return ids, m


def answer_token_logprobs(logits: torch.Tensor, text_ids: torch.Tensor, n_visual: int) -> torch.Tensor:
    """Log-probability of each text token given its prefix, shape (B, T)."""
    # text token j sits at sequence position 1 + n_visual + j and is predicted from the position before it
    start = n_visual
    pred = logits[:, start:start + text_ids.shape[1]]
    logp = torch.log_softmax(pred, dim=-1)
    return logp.gather(-1, text_ids.unsqueeze(-1)).squeeze(-1)


def sft_loss(model: StudentModel, visual: torch.Tensor, text_ids: torch.Tensor, mask: torch.Tensor):
    """Answer-token cross-entropy; returns (loss, hidden)."""
    logits, hidden = model.llm_forward(visual, text_ids)
    V = visual.shape[1] * visual.shape[2] * visual.shape[3]
    logp = answer_token_logprobs(logits, text_ids, V)
    mask = mask.to(logp.dtype)
    loss = -(logp * mask).sum() / mask.sum().clamp_min(1.0)
    return loss, hidden


@torch.no_grad()
def option_scores(model: StudentModel, video: VideoTensor, sample: VQASample, latent: torch.Tensor | None = None) -> np.ndarray:
    """Mean per-token log-likelihood of each option (plus ``<eos>``) after the question."""
    if not sample.options:
        raise ValueError("sample has no options")
    tok = model.tokenizer
    frames = torch.as_tensor(student_frames(video, sample), dtype=torch.get_default_dtype())[None]
    ts = torch.as_tensor(np.asarray(sample.timestamps), dtype=torch.get_default_dtype())[None]
    visual = model.visual_embeddings(frames, ts, latent)
    seqs, masks = zip(*(encode_text(tok, sample.question, opt) for opt in sample.options))
    ids, mask = pad_batch(list(seqs), list(masks), tok.pad_id)
    k = len(seqs)
    logits, _ = model.llm_forward(visual.expand(k, *visual.shape[1:]), ids)
    V = visual.shape[1] * visual.shape[2] * visual.shape[3]
    logp = answer_token_logprobs(logits, ids, V)
    mask = mask.to(logp.dtype)
    return ((logp * mask).sum(dim=1) / mask.sum(dim=1)).cpu().numpy()


def answer_mcq(model: StudentModel, video: VideoTensor, sample: VQASample, teacher=None) -> int:
    """Index of the highest-scoring option; ties go to the lowest index."""
    latent = None
    if model.needs_teacher:
        if teacher is None:
            raise ValueError(f"variant {model.cfg.variant} needs the teacher at inference")
        from .teacher4d import frames_tensor

        with torch.no_grad():
            latent = teacher.encode(frames_tensor(video))
    scores = option_scores(model, video, sample, latent)
    return int(np.argmax(scores))
