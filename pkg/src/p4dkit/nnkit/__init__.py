from .checkpoint import (
    CheckpointError,
    file_hash,
    load_checkpoint,
    save_checkpoint,
    state_hash,
)
from .gradcheck import GradCheckResult, grad_check
from .optim import Adam, OptState, cosine_warmup_lr
from .ops import (
    DEFAULT_TIMESCALE,
    cross_entropy,
    gelu,
    gelu_grad,
    sinusoidal_encoding,
    smooth_l1,
    smooth_l1_per_frame,
    xavier_bound,
    xavier_init,
    zero_init,
)
from .precision import current_mode, float_mode

__all__ = [
    "Adam",
    "CheckpointError",
    "DEFAULT_TIMESCALE",
    "GradCheckResult",
    "OptState",
    "cosine_warmup_lr",
    "cross_entropy",
    "current_mode",
    "file_hash",
    "float_mode",
    "gelu",
    "gelu_grad",
    "grad_check",
    "load_checkpoint",
    "save_checkpoint",
    "sinusoidal_encoding",
    "smooth_l1",
    "smooth_l1_per_frame",
    "state_hash",
    "xavier_bound",
    "xavier_init",
    "zero_init",
]
