"""Unified multimodal sequence assembly, transformer encoding, and pooling.

Token segments from the four modalities are laid into one fixed-layout
sequence, aggregate token first, with a learnable positional table added to
every row. Absent modalities keep their reserved rows; a fill policy decides
what those rows hold and whether attention may look at them. A small pre-norm
transformer runs over the sequence with key masking, and pooled embeddings
are read out per modality plus a unit-norm final vector.

The sequence length is a function of configuration alone, never of which
modalities happen to be present.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .datamodel import KIND_ORDER, ModalityKind
from .errors import (
    DimMismatch,
    EmptySegment,
    HeadDivisibility,
    InvalidSpec,
    UnknownPolicy,
)
from .nn_ops import l2_normalize, relu


class FillPolicy(enum.Enum):
    """How rows reserved for an absent modality are populated."""

    MASK = "mask"            # zero rows, excluded from attention
    ZERO = "zero"            # zero rows, visible to attention
    LEARNED_TOKEN = "learned_token"  # shared learnable token per kind, visible
    SYNTHESIZED = "synthesized"      # caller-provided rows, visible

    @classmethod
    def parse(cls, value) -> "FillPolicy":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise UnknownPolicy(
                f"unknown fill policy {value!r}; expected one of "
                f"{[p.value for p in cls]}"
            ) from None


@dataclass
class SequenceLayout:
    """Fixed row budget per modality segment."""

    image_tokens: int = 16
    text_tokens: int = 16

    def segment_length(self, kind: ModalityKind) -> int:
        return self.text_tokens if kind == ModalityKind.T else self.image_tokens

    @property
    def spans(self) -> dict[ModalityKind, tuple[int, int]]:
        spans = {}
        cursor = 1  # row 0 is the aggregate token
        for kind in KIND_ORDER:
            length = self.segment_length(kind)
            spans[kind] = (cursor, cursor + length)
            cursor += length
        return spans

    @property
    def total_rows(self) -> int:
        return 1 + sum(self.segment_length(k) for k in KIND_ORDER)


@dataclass
class EncoderConfig:
    depth: int = 2
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: float = 2.0
    dropout: float = 0.0
    final_dim: int = 64
    frozen: bool = False

    def validate(self):
        if self.embed_dim % self.heads != 0:
            raise HeadDivisibility(
                f"embed_dim {self.embed_dim} not divisible by {self.heads} heads"
            )
        if self.depth < 0:
            raise InvalidSpec("depth must be >= 0")
        if self.embed_dim <= 0 or self.final_dim <= 0 or self.heads <= 0:
            raise InvalidSpec("dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidSpec("dropout must lie in [0, 1)")


@dataclass
class UnifiedSequence:
    """One assembled (n+1) x D sequence with its attention mask and layout."""

    rows: torch.Tensor
    segment_spans: dict[ModalityKind, tuple[int, int]]
    attention_mask: torch.Tensor
    present: frozenset[ModalityKind]

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise DimMismatch(f"rows must be (n+1) x D, got {tuple(self.rows.shape)}")
        if self.attention_mask.shape != (self.rows.shape[0],):
            raise DimMismatch("attention mask length must match row count")
        if not bool(self.attention_mask[0]):
            raise InvalidSpec("the aggregate row may never be masked")


@dataclass
class PooledEmbeddings:
    aggregate: torch.Tensor
    per_modality: dict[ModalityKind, torch.Tensor]
    final: torch.Tensor


class SequenceAssembler(nn.Module):
    """Lays token segments into the fixed unified layout.

    Owns the aggregate token, the positional table over all n+1 rows, and one
    learnable fill token per modality kind.
    """

    def __init__(self, embed_dim: int, layout: SequenceLayout | None = None):
        super().__init__()
        if embed_dim <= 0:
            raise InvalidSpec("embed_dim must be positive")
        self.embed_dim = embed_dim
        self.layout = layout or SequenceLayout()
        self.aggregate_token = nn.Parameter(torch.zeros(embed_dim))
        self.positional = nn.Parameter(torch.zeros(self.layout.total_rows, embed_dim))
        self.fill_tokens = nn.Parameter(torch.zeros(len(KIND_ORDER), embed_dim))

    def _segment_rows(self, kind, segment, policy, synthesized):
        """Rows and mask for one segment; absent segments follow the policy."""
        length = self.layout.segment_length(kind)
        if segment is not None:
            t = segment.tokens
            if t.shape[1] != self.embed_dim:
                raise DimMismatch(
                    f"{kind.value} tokens have dim {t.shape[1]}, expected {self.embed_dim}"
                )
            if t.shape[0] != length:
                raise DimMismatch(
                    f"{kind.value} segment has {t.shape[0]} rows, layout wants {length}"
                )
            return t, segment.valid_mask.clone()

        if policy == FillPolicy.MASK:
            rows = torch.zeros(length, self.embed_dim)
            return rows, torch.zeros(length, dtype=torch.bool)
        if policy == FillPolicy.ZERO:
            return torch.zeros(length, self.embed_dim), torch.ones(length, dtype=torch.bool)
        if policy == FillPolicy.LEARNED_TOKEN:
            rows = self.fill_tokens[kind.order].unsqueeze(0).expand(length, -1)
            return rows, torch.ones(length, dtype=torch.bool)
        if policy == FillPolicy.SYNTHESIZED:
            if synthesized is None or kind not in synthesized:
                # no pseudo rows supplied for this kind: treat it as masked
                rows = torch.zeros(length, self.embed_dim)
                return rows, torch.zeros(length, dtype=torch.bool)
            rows = synthesized[kind]
            if rows.ndim == 1:
                rows = rows.unsqueeze(0).expand(length, -1)
            if rows.shape != (length, self.embed_dim):
                raise DimMismatch(
                    f"synthesized rows for {kind.value} have shape {tuple(rows.shape)}, "
                    f"expected ({length}, {self.embed_dim})"
                )
            return rows, torch.ones(length, dtype=torch.bool)
        raise UnknownPolicy(f"unhandled policy {policy!r}")

    def assemble(self, segments, fill="mask", synthesized=None) -> UnifiedSequence:
        """Build the unified sequence for one sample.

        segments maps ModalityKind to a TokenSequence or None/missing for
        absent modalities; synthesized supplies rows per absent kind when the
        policy asks for them.
        """
        policy = FillPolicy.parse(fill)
        parts = [self.aggregate_token.unsqueeze(0)]
        masks = [torch.ones(1, dtype=torch.bool)]
        present = []
        for kind in KIND_ORDER:
            segment = segments.get(kind)
            if segment is not None:
                present.append(kind)
            rows, mask = self._segment_rows(kind, segment, policy, synthesized)
            parts.append(rows)
            masks.append(mask)
        rows = torch.cat(parts, dim=0) + self.positional
        return UnifiedSequence(
            rows=rows,
            segment_spans=self.layout.spans,
            attention_mask=torch.cat(masks),
            present=frozenset(present),
        )

    def assemble_batch(self, segment_dicts, fill="mask", synthesized_list=None):
        """Stack per-sample assemblies into (B, n+1, D) rows and (B, n+1) masks."""
        seqs = [
            self.assemble(
                segs,
                fill,
                None if synthesized_list is None else synthesized_list[i],
            )
            for i, segs in enumerate(segment_dicts)
        ]
        rows = torch.stack([s.rows for s in seqs])
        mask = torch.stack([s.attention_mask for s in seqs])
        return rows, mask, seqs


class Attention(nn.Module):
    """Multi-head self-attention with key masking; masked keys get no weight."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads != 0:
            raise HeadDivisibility(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        # no qkv bias: a constant key shift cancels in the softmax anyway
        self.qkv = nn.Linear(dim, dim * 3, bias=False)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)
        self.proj_drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = self.attn_drop(scores.softmax(dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj_drop(self.proj(out))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float, dropout: float = 0.0):
        super().__init__()
        hidden = max(int(dim * ratio), 1)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.drop(self.fc2(self.drop(relu(self.fc1(x)))))


class EncoderBlock(nn.Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = Attention(cfg.embed_dim, cfg.heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = Mlp(cfg.embed_dim, cfg.mlp_ratio, cfg.dropout)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask)
        x = x + self.mlp(self.ln2(x))
        return x


class TransformerEncoder(nn.Module):
    """Stack of pre-norm blocks; depth 0 is the identity. No final norm."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.depth))
        if cfg.frozen:
            for p in self.parameters():
                p.requires_grad_(False)

    def forward(self, rows: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = rows.ndim == 2
        if squeeze:
            rows = rows.unsqueeze(0)
            if key_mask is not None:
                key_mask = key_mask.unsqueeze(0)
        if rows.shape[-1] != self.cfg.embed_dim:
            raise DimMismatch(
                f"rows have dim {rows.shape[-1]}, encoder wants {self.cfg.embed_dim}"
            )
        for block in self.blocks:
            rows = block(rows, key_mask)
        return rows.squeeze(0) if squeeze else rows


class Readout(nn.Module):
    """Linear projection D -> d; the final embedding is its L2 normalization."""

    def __init__(self, embed_dim: int, final_dim: int):
        super().__init__()
        self.proj = nn.Linear(embed_dim, final_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return l2_normalize(self.proj(x), dim=-1)


def pool_segments(encoded: torch.Tensor, seq: UnifiedSequence) -> dict[ModalityKind, torch.Tensor]:
    """Mean over valid rows of each segment that has any; error on empty present ones."""
    pooled = {}
    for kind, (start, stop) in seq.segment_spans.items():
        valid = seq.attention_mask[start:stop]
        if not bool(valid.any()):
            if kind in seq.present:
                raise EmptySegment(f"present modality {kind.value} has no valid rows")
            continue
        rows = encoded[start:stop][valid]
        pooled[kind] = rows.mean(dim=0)
    return pooled


def pool_segments_batch(encoded: torch.Tensor, mask: torch.Tensor,
                        spans: dict[ModalityKind, tuple[int, int]]):
    """Batched segment means: returns per-kind (B, D) vectors and (B,) validity."""
    pooled, has = {}, {}
    for kind, (start, stop) in spans.items():
        m = mask[:, start:stop].float()
        counts = m.sum(dim=1)
        sums = (encoded[:, start:stop] * m.unsqueeze(-1)).sum(dim=1)
        pooled[kind] = sums / counts.clamp_min(1.0).unsqueeze(-1)
        has[kind] = counts > 0
    return pooled, has


def pool_and_readout(encoded: torch.Tensor, seq: UnifiedSequence, readout: Readout,
                     fused: torch.Tensor | None = None) -> PooledEmbeddings:
    """Read out one encoded sequence.

    The final vector projects the fused representation when one is supplied
    (see cue fusion) and the encoded aggregate row otherwise.
    """
    aggregate = encoded[0]
    per_modality = pool_segments(encoded, seq)
    final = readout(fused if fused is not None else aggregate)
    return PooledEmbeddings(aggregate=aggregate, per_modality=per_modality, final=final)
