"""Learning-rate schedule and the Adam-style optimizer used for every training stage."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return math.ceil(warmup_ratio * total_steps)


def cosine_warmup_lr(step: int, total_steps: int, warmup_ratio: float, base_lr: float) -> float:
    """Linear ramp from 0 to ``base_lr`` over ``ceil(warmup_ratio * total_steps)`` steps,
    then half-cosine decay reaching 0 at ``total_steps``."""
    if not 0.0 <= warmup_ratio < 1.0:
        raise ValueError(f"warmup_ratio must lie in [0, 1), got {warmup_ratio}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, warmup_ratio)
    if step < warm:
        return base_lr * step / warm
    decay = total_steps - warm
    if decay <= 0:
        return base_lr
    progress = (step - warm) / decay
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptState:
    base_lr: float
    total_steps: int
    warmup_ratio: float = 0.03
    step: int = 0
    lr_history: list[float] = field(default_factory=list)


class Adam:
    """Adam with the cosine/warmup schedule applied before every update.

    Only parameters with ``requires_grad`` at construction time are tracked;
    frozen parameters are never touched. Gradient clipping is optional
    (``clip_norm=None`` disables it).
    """

    def __init__(self, params, base_lr: float, total_steps: int, warmup_ratio: float = 0.03,
                 weight_decay: float = 0.0, clip_norm: float | None = 1.0):
        self.params = [p for p in params if p.requires_grad]
        self.state = OptState(base_lr, total_steps, warmup_ratio)
        self.clip_norm = clip_norm
        self._opt = (
            torch.optim.AdamW(self.params, lr=base_lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=weight_decay)
            if self.params else None
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        st = self.state
        # lr for update k (1-based) is the schedule value at k, so step 0's zero lr is skipped
        lr = cosine_warmup_lr(min(st.step + 1, st.total_steps), st.total_steps, st.warmup_ratio, st.base_lr)
        st.step += 1
        st.lr_history.append(lr)
        if self._opt is None:
            return lr
        if self.clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(self.params, self.clip_norm)
        for group in self._opt.param_groups:
            group["lr"] = lr
        self._opt.step()
        return lr
