from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    worst: tuple[str, tuple[int, ...]] | None
    errors: list[float]

    def __float__(self) -> float:
        return self.max_rel_error


def _named(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(f"param{i}", p) for i, p in enumerate(params)]


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor] | Mapping[str, torch.Tensor],
    epsilon: float = 1e-5,
    samples_per_param: int = 8,
    seed: int = 0,
    noise_floor: float = 1e5,
) -> GradCheckResult:
    """Compare autograd gradients with central finite differences.

    ``loss_fn`` must be deterministic and close over ``params``. For each
    parameter tensor a random subset of coordinates is perturbed in place by
    ``+-epsilon``; per-coordinate relative error is
    ``|g - g_fd| / max(|g| + |g_fd|, floor)`` with ``floor = noise_floor * eps * |loss| / epsilon``.
    """
    named = _named(params)
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError("loss is non-finite at the base point")
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    # a central difference carries roundoff of about eps * |loss| / epsilon; gradients far
    # below that (e.g. exactly-zero directions such as attention key biases) are judged
    # on this absolute scale instead of relative to their own vanishing magnitude
    floor = max(noise_floor * torch.finfo(loss.dtype).eps * max(abs(loss.item()), 1.0) / epsilon, 1e-12)
    rng = np.random.default_rng(seed)
    errors: list[float] = []
    worst = None
    worst_err = -1.0
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        n = flat.numel()
        idx = rng.choice(n, size=min(samples_per_param, n), replace=False)
        for k in idx:
            k = int(k)
            orig = flat[k].item()
            with torch.no_grad():
                flat[k] = orig + epsilon
                up = loss_fn().item()
                flat[k] = orig - epsilon
                down = loss_fn().item()
                flat[k] = orig
            coord = tuple(int(c) for c in np.unravel_index(k, tuple(p.shape)))
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss when perturbing {name}{list(coord)}")
            fd = (up - down) / (2 * epsilon)
            an = g.view(-1)[k].item()
            if not np.isfinite(an):
                raise FloatingPointError(f"non-finite gradient at {name}{list(coord)}")
            err = abs(an - fd) / max(abs(an) + abs(fd), floor)
            errors.append(err)
            if err > worst_err:
                worst_err, worst = err, (name, coord)
    return GradCheckResult(max(errors) if errors else 0.0, len(errors), worst, errors)
