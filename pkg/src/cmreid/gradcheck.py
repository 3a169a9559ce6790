"""Finite-difference verification of autograd gradients.

Central differences at 64-bit precision against the analytic backward pass,
with rejection of samples that sit on (or step across) a ReLU kink: for each
perturbed coordinate the harness records every pre-activation evaluated
through :func:`cmreid.nn_ops.relu` on both sides of the perturbation and
skips the coordinate when any affected element changes sign or comes within
``kink_margin`` of zero, where the subgradient makes the comparison
meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NonFiniteGradient
from .nn_ops import record_preactivations


@dataclass
class GradCheckResult:
    max_rel_err: float
    checked: int
    excluded: int

    def __float__(self):
        return self.max_rel_err


def _kink_crossed(buf_plus, buf_minus, margin: float) -> bool:
    for a, b in zip(buf_plus, buf_minus):
        affected = a != b
        if not bool(affected.any()):
            continue
        av, bv = a[affected], b[affected]
        if bool((torch.sign(av) != torch.sign(bv)).any()):
            return True
        if bool((av.abs() < margin).any()) or bool((bv.abs() < margin).any()):
            return True
    return False


def grad_check(fn, params, eps: float = 1e-5, samples_per_tensor: int = 8,
               seed: int = 0, kink_margin: float = 1e-3) -> GradCheckResult:
    """Compare autograd gradients of ``fn()`` against central differences.

    ``fn`` is a zero-argument callable returning a scalar tensor computed
    from ``params`` (a list of float64 tensors with requires_grad). For each
    tensor a seeded sample of coordinates is perturbed by ±eps; the relative
    error is |analytic − numeric| / max(|analytic|, |numeric|, 1e-8), and its
    maximum over all non-excluded samples is returned.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise NonFiniteGradient("grad_check requires float64 parameters")
        if p.grad is not None:
            p.grad = None

    loss = fn()
    if not torch.isfinite(loss):
        raise NonFiniteGradient(f"base evaluation is {loss.item()}")
    loss.backward()
    analytic = []
    for p in params:
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("analytic gradient contains non-finite values")
        analytic.append(g.detach().clone())

    rng = np.random.default_rng(seed)
    max_err, checked, excluded = 0.0, 0, 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            n = p.numel()
            k = min(samples_per_tensor, n)
            coords = rng.choice(n, size=k, replace=False)
            flat = p.view(-1)
            for c in coords:
                c = int(c)
                orig = flat[c].item()

                flat[c] = orig + eps
                with record_preactivations() as buf_plus:
                    f_plus = fn()
                flat[c] = orig - eps
                with record_preactivations() as buf_minus:
                    f_minus = fn()
                flat[c] = orig

                if not (torch.isfinite(f_plus) and torch.isfinite(f_minus)):
                    raise NonFiniteGradient("perturbed evaluation is non-finite")
                if _kink_crossed(buf_plus, buf_minus, kink_margin):
                    excluded += 1
                    continue

                numeric = (f_plus.item() - f_minus.item()) / (2.0 * eps)
                a = g.view(-1)[c].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                max_err = max(max_err, err)
                checked += 1
    return GradCheckResult(max_rel_err=max_err, checked=checked, excluded=excluded)
