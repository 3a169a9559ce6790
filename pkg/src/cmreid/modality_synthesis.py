"""Pseudo-embedding generation for absent modalities.

One affine generator per target kind maps the concatenation of the other
three pooled vectors (absent sources zero-filled) plus three source-presence
indicators to a D-dimensional pseudo embedding. Generators learn from a
cosine consistency loss computed only on tuples where the target modality was
actually observed; on batches lacking the target they receive no gradient.
"""

from __future__ import annotations

import enum

import torch
from torch import nn

from .datamodel import KIND_ORDER, ModalityKind
from .errors import InvalidSpec, NoSourceModality, UnknownPolicy, ZeroVector
from .unified_encoder import PooledEmbeddings

_NORM_FLOOR = 1e-8


class FillMode(enum.Enum):
    ZERO = "zero"
    LEARNED_TOKEN = "learned_token"
    SYNTH = "synth"

    @classmethod
    def parse(cls, value) -> "FillMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise UnknownPolicy(
                f"unknown fill mode {value!r}; expected one of {[m.value for m in cls]}"
            ) from None


def _as_map(pooled) -> dict[ModalityKind, torch.Tensor]:
    if isinstance(pooled, PooledEmbeddings):
        return pooled.per_modality
    return pooled


class ModalitySynthesizer(nn.Module):
    """Per-target affine generators over the other modalities' pooled vectors."""

    def __init__(self, embed_dim: int):
        super().__init__()
        if embed_dim <= 0:
            raise InvalidSpec("embed_dim must be positive")
        self.embed_dim = embed_dim
        n_sources = len(KIND_ORDER) - 1
        self.nets = nn.ModuleDict(
            {
                kind.value: nn.Linear(n_sources * embed_dim + n_sources, embed_dim)
                for kind in KIND_ORDER
            }
        )

    def synthesize(self, pooled, target: ModalityKind) -> torch.Tensor:
        """Pseudo embedding for ``target`` from whatever other kinds are present.

        Accepts a kind -> vector map (entries may be (D,) or batched (B, D);
        missing or None entries count as absent) or ``PooledEmbeddings``.
        """
        mapping = _as_map(pooled)
        sources = [k for k in KIND_ORDER if k != target]
        available = {k: mapping.get(k) for k in sources if mapping.get(k) is not None}
        if not available:
            raise NoSourceModality(
                f"cannot synthesize {target.value}: no other modality present"
            )
        template = next(iter(available.values()))
        parts, flags = [], []
        for k in sources:
            v = available.get(k)
            if v is None:
                parts.append(torch.zeros_like(template))
                flags.append(0.0)
            else:
                if v.shape != template.shape:
                    raise InvalidSpec("source pooled vectors must share their shape")
                parts.append(v)
                flags.append(1.0)
        flag_row = torch.tensor(flags, dtype=template.dtype)
        if template.ndim == 2:
            flag_row = flag_row.unsqueeze(0).expand(template.shape[0], -1)
        x = torch.cat(parts + [flag_row], dim=-1)
        return self.nets[target.value](x)


def synthesis_loss(pseudo: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """1 - cosine(pseudo, real), averaged over leading dimensions; range [0, 2]."""
    if pseudo.shape != real.shape:
        raise InvalidSpec("pseudo and real must share their shape")
    pn = pseudo.norm(dim=-1)
    rn = real.norm(dim=-1)
    if (pn < _NORM_FLOOR).any() or (rn < _NORM_FLOOR).any():
        raise ZeroVector("cosine undefined for (near-)zero vectors")
    cos = (pseudo * real).sum(dim=-1) / (pn * rn)
    return (1.0 - cos).mean()


def fill_missing(pooled, mode, synthesizer: ModalitySynthesizer | None = None,
                 fill_tokens: torch.Tensor | None = None) -> dict[ModalityKind, torch.Tensor]:
    """Complete the per-modality map so every kind has a vector.

    Present entries pass through untouched (same tensors). Absent kinds are
    filled with zeros, the per-kind learnable fill token, or a synthesized
    pseudo embedding, depending on ``mode``.
    """
    mode = FillMode.parse(mode)
    mapping = _as_map(pooled)
    present = {k: v for k, v in mapping.items() if v is not None}
    if not present:
        raise NoSourceModality("cannot fill a tuple with no present modality")
    template = next(iter(present.values()))

    out: dict[ModalityKind, torch.Tensor] = {}
    for kind in KIND_ORDER:
        if kind in present:
            out[kind] = present[kind]
            continue
        if mode == FillMode.ZERO:
            out[kind] = torch.zeros_like(template)
        elif mode == FillMode.LEARNED_TOKEN:
            if fill_tokens is None:
                raise InvalidSpec("learned_token fill needs the fill-token table")
            token = fill_tokens[kind.order]
            out[kind] = token.unsqueeze(0).expand_as(template) if template.ndim == 2 else token
        else:  # FillMode.SYNTH
            if synthesizer is None:
                raise InvalidSpec("synth fill needs a synthesizer")
            out[kind] = synthesizer.synthesize(present, kind)
    return out
