from __future__ import annotations

import contextlib

import torch

FLOAT_MODES = {"32": torch.float32, "64": torch.float64}


@contextlib.contextmanager
def float_mode(mode: str = "32"):
    """Temporarily switch torch's default dtype ("32" for training, "64" for verification)."""
    if mode not in FLOAT_MODES:
        raise ValueError(f"unknown float mode {mode!r}; expected one of {sorted(FLOAT_MODES)}")
    prev = torch.get_default_dtype()
    torch.set_default_dtype(FLOAT_MODES[mode])
    try:
        yield FLOAT_MODES[mode]
    finally:
        torch.set_default_dtype(prev)


def current_mode() -> str:
    return "64" if torch.get_default_dtype() == torch.float64 else "32"
