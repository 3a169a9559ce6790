"""Cross-modal cue interaction and gated fusion into the identity embedding.

Interaction: one multi-head attention round in which each present modality's
pooled vector attends over the set {aggregate} union {the other present
modality vectors}, with a residual connection. The key set is ordered by
modality kind, never by map insertion order, so the operation has set
semantics over its input map.

Fusion: each interacted cue passes a sigmoid gate conditioned on (aggregate,
cue), gated cues are summed onto the aggregate, and the shared readout
projects and normalizes the result. Gates let the model down-weight noisy
synthesized cues.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .datamodel import KIND_ORDER, ModalityKind
from .errors import EmptyInput, HeadDivisibility, InvalidSpec, MissingRGB
from .modality_synthesis import ModalitySynthesizer, _as_map
from .nn_ops import relu
from .unified_encoder import Readout


@dataclass
class FusionConfig:
    heads: int = 2
    gate_hidden: int = 64
    enabled: bool = True

    def validate(self, embed_dim: int):
        if self.heads < 1 or embed_dim % self.heads != 0:
            raise HeadDivisibility(
                f"embed_dim {embed_dim} not divisible by {self.heads} fusion heads"
            )
        if self.gate_hidden < 1:
            raise InvalidSpec("gate_hidden must be >= 1")


class CueInteraction(nn.Module):
    """One attention round over the pooled modality vectors plus the aggregate."""

    def __init__(self, embed_dim: int, heads: int = 2):
        super().__init__()
        if embed_dim % heads != 0:
            raise HeadDivisibility(f"embed_dim {embed_dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.scale = self.head_dim ** -0.5
        self.wq = nn.Linear(embed_dim, embed_dim)
        # key bias would cancel in the softmax; leave it out
        self.wk = nn.Linear(embed_dim, embed_dim, bias=False)
        self.wv = nn.Linear(embed_dim, embed_dim)
        self.wo = nn.Linear(embed_dim, embed_dim)

    def _attend(self, query: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        # query (B, D), keys (B, m, D)
        b, m, d = keys.shape
        q = self.wq(query).view(b, self.heads, self.head_dim)
        k = self.wk(keys).view(b, m, self.heads, self.head_dim).permute(0, 2, 1, 3)
        v = self.wv(keys).view(b, m, self.heads, self.head_dim).permute(0, 2, 1, 3)
        scores = torch.einsum("bhd,bhmd->bhm", q, k) * self.scale
        attn = scores.softmax(dim=-1)
        out = torch.einsum("bhm,bhmd->bhd", attn, v).reshape(b, d)
        return query + self.wo(out)

    def forward(self, aggregate: torch.Tensor, per_modality) -> dict[ModalityKind, torch.Tensor]:
        """Interacted vector for each present kind; set semantics over the map."""
        mapping = _as_map(per_modality)
        present = [k for k in KIND_ORDER if mapping.get(k) is not None]
        if not present:
            raise EmptyInput("cue interaction needs at least one present modality")

        single = aggregate.ndim == 1
        agg = aggregate.unsqueeze(0) if single else aggregate
        vecs = {
            k: (mapping[k].unsqueeze(0) if single else mapping[k]) for k in present
        }
        out = {}
        for kind in present:
            keys = torch.stack(
                [agg] + [vecs[k] for k in present if k != kind], dim=1
            )
            res = self._attend(vecs[kind], keys)
            out[kind] = res.squeeze(0) if single else res
        return out


class GatedFusion(nn.Module):
    """Sigmoid-gated residual sum of interacted cues onto the aggregate.

    ``force_gate`` is a test hook: when set, every gate takes that constant
    value instead of the learned sigmoid.
    """

    def __init__(self, embed_dim: int, gate_hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(2 * embed_dim, gate_hidden)
        self.fc2 = nn.Linear(gate_hidden, embed_dim)
        self.force_gate: float | None = None

    def compute_gates(self, aggregate: torch.Tensor, cue: torch.Tensor) -> torch.Tensor:
        h = relu(self.fc1(torch.cat([aggregate, cue], dim=-1)))
        return torch.sigmoid(self.fc2(h))

    def fuse(self, aggregate: torch.Tensor, interacted, readout: Readout) -> torch.Tensor:
        """normalize(project(aggregate + sum_kind gate ⊙ cue)); unit-norm output."""
        mapping = _as_map(interacted)
        present = [k for k in KIND_ORDER if mapping.get(k) is not None]
        if not present:
            raise EmptyInput("gated fusion needs at least one interacted cue")
        total = aggregate
        for kind in present:
            cue = mapping[kind]
            if self.force_gate is not None:
                gate = torch.full_like(cue, self.force_gate)
            else:
                gate = self.compute_gates(aggregate, cue)
            total = total + gate * cue
        return readout(total)


def gallery_side_fuse(pooled, query_kinds, synthesizer: ModalitySynthesizer,
                      interaction: CueInteraction, fusion: GatedFusion,
                      readout: Readout) -> torch.Tensor:
    """Gallery inference path for cross-modal protocols.

    The query's modality kind(s) are synthesized from the gallery tuple's RGB
    pooled embedding, then interaction and gated fusion run over {RGB real,
    synthesized kinds}. Multi-kind queries synthesize each kind.
    """
    if isinstance(query_kinds, ModalityKind):
        query_kinds = (query_kinds,)
    query_kinds = tuple(query_kinds)
    if any(k == ModalityKind.R for k in query_kinds):
        raise InvalidSpec("gallery-side synthesis targets non-RGB query kinds only")
    if not query_kinds:
        raise EmptyInput("no query kind to synthesize")

    rgb = pooled.per_modality.get(ModalityKind.R)
    if rgb is None:
        raise MissingRGB("gallery tuple has no RGB pooled embedding")
    aggregate = pooled.aggregate

    sources = {ModalityKind.R: rgb}
    cues = {ModalityKind.R: rgb}
    for kind in query_kinds:
        cues[kind] = synthesizer.synthesize(sources, kind)
    interacted = interaction(aggregate, cues)
    return fusion.fuse(aggregate, interacted, readout)
