"""Small shared tensor ops.

All ReLU applications in the package go through :func:`relu` so the
finite-difference harness can observe pre-activation values and exclude
samples that sit on (or cross) the kink.
"""

from __future__ import annotations

import contextlib
import contextvars

import torch

_PREACT_BUFFER: contextvars.ContextVar[list | None] = contextvars.ContextVar(
    "cmreid_preact_buffer", default=None
)


def relu(x: torch.Tensor) -> torch.Tensor:
    buf = _PREACT_BUFFER.get()
    if buf is not None:
        buf.append(x.detach().clone())
    return torch.relu(x)


@contextlib.contextmanager
def record_preactivations():
    """Collect every pre-ReLU tensor evaluated inside the block, in call order."""
    buf: list[torch.Tensor] = []
    token = _PREACT_BUFFER.set(buf)
    try:
        yield buf
    finally:
        _PREACT_BUFFER.reset(token)


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    """Scale to unit L2 norm along ``dim``; invariant to positive rescaling of ``x``."""
    return x / x.norm(dim=dim, keepdim=True).clamp_min(eps)
