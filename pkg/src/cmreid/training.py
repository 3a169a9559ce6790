"""Contrastive training with the two-phase progressive schedule.

Each step embeds one batch of tuples twice, as an RGB-only view and as a
partner-modality view, and pulls same-identity embeddings together with a
symmetric multi-positive InfoNCE. Phase 1 uses RGB-text pairs with sketch and
infrared segments filled by synthesized pseudo embeddings; phase 2 cycles
round-robin over RGB-text (still synth-filled), RGB-infrared, and RGB-sketch
passes, the latter two encoded with real rows only. The synthesizers train
through a cosine consistency loss against the real partner embedding, with
both sides detached so nothing else moves.

Plain SGD with a fixed learning rate keeps the run bit-reproducible per seed.

Epoch 0 doubles as a burn-in: it runs on the generic init with live batch
statistics, and when it ends the closed-form calibration pass fits the linear
geometry (stem whitening, cross-kind cue alignment, text table, synthesizer
blocks) on the training split. Later epochs descend from that solution with
normalization pinned to the settled running moments.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .calibration import calibrate, norm_layers_eval
from .datamodel import KIND_ORDER, Corpus, ModalityKind, split_by_view
from .errors import (
    EmptyCorpus,
    InsufficientClasses,
    InvalidSpec,
    NonFiniteLoss,
    NoPositive,
)
from .fsio import atomic_write_text
from .gradcheck import GradCheckResult, grad_check  # re-exported verification harness
from .model import ModelConfig, ReidModel, build_model
from .modality_synthesis import synthesis_loss
from .nn_ops import l2_normalize

R, S, I, T = ModalityKind.R, ModalityKind.S, ModalityKind.I, ModalityKind.T

__all__ = [
    "TrainConfig", "EpochRecord", "TrainLog", "info_nce", "triplet_satisfaction",
    "train", "grad_check", "GradCheckResult",
]


@dataclass
class TrainConfig:
    """Schedule and optimization knobs.

    The freeze flags exclude whole components from optimization: the image
    tokenizers, the text embedder, the sequence assembler plus transformer,
    the synthesis generators, the interaction/gating stack, or the readout
    head.
    """

    phase1_epochs: int = 8
    phase2_epochs: int = 16
    batch_size: int = 32
    learning_rate: float = 1e-3
    temperature: float = 0.07
    lambda_syn: float = 0.5
    seed: int = 0
    holdout_views: int = 1
    freeze_tokenizer: bool = False
    freeze_text: bool = False
    freeze_encoder: bool = False
    freeze_synthesizer: bool = False
    freeze_fusion: bool = False
    freeze_readout: bool = False

    def validate(self):
        if self.temperature <= 0:
            raise InvalidSpec("temperature must be > 0")
        if self.batch_size < 2:
            raise InvalidSpec("batch_size must be >= 2")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise InvalidSpec("epoch counts must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidSpec("learning_rate must be > 0")
        if self.lambda_syn < 0:
            raise InvalidSpec("lambda_syn must be >= 0")
        if self.holdout_views < 0:
            raise InvalidSpec("holdout_views must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    phase: int
    loss_total: float
    loss_nce: float
    loss_syn: float
    triplet_satisfaction: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def save_jsonl(self, path: str):
        lines = [json.dumps(asdict(rec), sort_keys=True) for rec in self.records]
        atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load_jsonl(cls, path: str) -> "TrainLog":
        records = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    records.append(EpochRecord(**json.loads(line)))
        return cls(records=records)


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------

def info_nce(emb_a: torch.Tensor, emb_b: torch.Tensor, labels_a,
             labels_b=None, temperature: float = 0.07) -> torch.Tensor:
    """Symmetric multi-positive InfoNCE over cosine similarities.

    Positives for row i of ``emb_a`` are all rows of ``emb_b`` sharing its
    label; the row loss is the negative mean log-likelihood over them, the
    column loss mirrors it, and the result is their average. Expects
    unit-norm embeddings (so the dot product is the cosine).
    """
    if temperature <= 0:
        raise InvalidSpec("temperature must be > 0")
    labels_a = torch.as_tensor(labels_a)
    labels_b = labels_a if labels_b is None else torch.as_tensor(labels_b)
    if emb_a.shape[0] != labels_a.shape[0] or emb_b.shape[0] != labels_b.shape[0]:
        raise InvalidSpec("labels must align with embedding rows")

    sims = (emb_a @ emb_b.T) / temperature
    pos = labels_a.unsqueeze(1) == labels_b.unsqueeze(0)
    rows_ok = pos.any(dim=1)
    if not bool(rows_ok.all()):
        raise NoPositive(int((~rows_ok).nonzero()[0]))
    cols_ok = pos.any(dim=0)
    if not bool(cols_ok.all()):
        raise NoPositive(int((~cols_ok).nonzero()[0]))

    log_p_rows = torch.log_softmax(sims, dim=1)
    row_loss = -(log_p_rows * pos).sum(dim=1) / pos.sum(dim=1)
    log_p_cols = torch.log_softmax(sims, dim=0)
    col_loss = -(log_p_cols * pos).sum(dim=0) / pos.sum(dim=0)
    return (row_loss.mean() + col_loss.mean()) / 2


def triplet_satisfaction(embeddings, labels, modality_tags=None,
                         max_exact: int = 1000, sample_triplets: int = 200_000,
                         seed: int = 0) -> float:
    """Fraction of (query, positive, negative) triples with strictly greater
    positive cosine; ties count as violations.

    When ``modality_tags`` is given, both the positive and the negative are
    restricted to samples whose tag differs from the query's, so the metric
    audits cross-modality ordering only. Up to ``max_exact`` embeddings every
    triple is enumerated; beyond that a seeded sample of ``sample_triplets``
    triples estimates the fraction.
    """
    emb = torch.as_tensor(embeddings, dtype=torch.float64)
    emb = l2_normalize(emb, dim=-1)
    labels = np.asarray(labels)
    tags = None if modality_tags is None else np.asarray(modality_tags)
    n = emb.shape[0]
    if labels.shape[0] != n or (tags is not None and tags.shape[0] != n):
        raise InvalidSpec("labels/tags must align with embedding rows")
    if np.unique(labels).size < 2:
        raise InsufficientClasses("triplet satisfaction needs >= 2 identities")

    sims = (emb @ emb.T).numpy()

    if n <= max_exact:
        satisfied = 0
        total = 0
        for q in range(n):
            allowed = np.arange(n) != q
            if tags is not None:
                allowed &= tags != tags[q]
            pos = allowed & (labels == labels[q])
            neg = allowed & (labels != labels[q])
            if not pos.any() or not neg.any():
                continue
            neg_sorted = np.sort(sims[q, neg])
            # ranks of each positive among negatives, strict inequality
            satisfied += int(np.searchsorted(neg_sorted, sims[q, pos], side="left").sum())
            total += int(pos.sum()) * int(neg.sum())
        if total == 0:
            raise InsufficientClasses("no valid triplets under the given tags")
        return satisfied / total

    rng = np.random.default_rng(seed)
    by_label: dict = {}
    for i, lab in enumerate(labels):
        by_label.setdefault(lab, []).append(i)
    satisfied = 0
    drawn = 0
    attempts = 0
    max_attempts = sample_triplets * 20
    while drawn < sample_triplets and attempts < max_attempts:
        attempts += 1
        q = int(rng.integers(n))
        pool = by_label[labels[q]]
        g = pool[int(rng.integers(len(pool)))]
        if g == q or (tags is not None and tags[g] == tags[q]):
            continue
        h = int(rng.integers(n))
        if labels[h] == labels[q] or (tags is not None and tags[h] == tags[q]):
            continue
        drawn += 1
        if sims[q, g] > sims[q, h]:
            satisfied += 1
    if drawn == 0:
        raise InsufficientClasses("no valid triplets under the given tags")
    return satisfied / drawn


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

_FREEZE_GROUPS = (
    ("freeze_tokenizer", lambda m: m.image_tokenizers.parameters()),
    ("freeze_text", lambda m: m.text_embedder.parameters()),
    ("freeze_encoder", lambda m: list(m.assembler.parameters()) + list(m.encoder.parameters())),
    ("freeze_synthesizer", lambda m: m.synthesizer.parameters()),
    ("freeze_fusion", lambda m: list(m.interaction.parameters()) + list(m.gated.parameters())),
    ("freeze_readout", lambda m: m.readout.parameters()),
)


def _apply_freezes(model: ReidModel, cfg: TrainConfig):
    for flag, group in _FREEZE_GROUPS:
        if getattr(cfg, flag):
            for p in group(model):
                p.requires_grad_(False)


def _probe_embeddings(model: ReidModel, tuples):
    """Solo-modality embeddings of every real modality of every tuple."""
    embs, labs, tags = [], [], []
    with torch.no_grad():
        for kind in KIND_ORDER:
            subset = [t for t in tuples if kind in t.presence]
            if not subset:
                continue
            out = model.embed_tuples(subset, use_kinds={kind}, fill="mask")
            embs.append(out.final)
            labs.extend(t.identity_id for t in subset)
            tags.extend(kind.value for _ in subset)
    return torch.cat(embs), labs, tags


def _chunks(order, size):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def train(corpus: Corpus, cfg: TrainConfig | None = None,
          model_cfg: ModelConfig | None = None,
          on_epoch=None) -> tuple[ReidModel, TrainLog]:
    """Run the two-phase schedule; returns the trained model and its log.

    Bit-reproducible per (seed, config, corpus) on one platform: parameter
    init draws from a seeded torch.Generator and batch order from a seeded
    numpy Generator, and nothing consumes global RNG state.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if not corpus.tuples:
        raise EmptyCorpus("corpus has no tuples")
    train_tuples, heldout = split_by_view(corpus, cfg.holdout_views)
    if not train_tuples:
        raise EmptyCorpus("holdout leaves no training views")
    probe_tuples = heldout if heldout else train_tuples

    eligible = {
        kind: [t for t in train_tuples if R in t.presence and kind in t.presence]
        for kind in (T, I, S)
    }
    phase2_kinds = [k for k in (T, I, S) if eligible[k]]
    if cfg.phase1_epochs > 0 and not eligible[T]:
        raise EmptyCorpus("phase 1 needs tuples carrying both RGB and text")
    if not phase2_kinds:
        raise EmptyCorpus("no tuple carries RGB plus a partner modality")

    model = build_model(model_cfg, seed=cfg.seed)
    _apply_freezes(model, cfg)
    trainable = [p for p in model.parameters() if p.requires_grad]
    if not trainable:
        raise InvalidSpec("every component is frozen; nothing to train")
    opt = torch.optim.SGD(trainable, lr=cfg.learning_rate)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 101])))

    log = TrainLog()
    for epoch in range(cfg.phase1_epochs + cfg.phase2_epochs):
        phase = 1 if epoch < cfg.phase1_epochs else 2
        pair_kinds = [T] if phase == 1 else phase2_kinds
        model.train()
        # epoch 0 is the burn-in: batch statistics run live and the geometry
        # is whatever the generic init gives. After it, calibrate() has fitted
        # the linear structure and settled the running moments, and the norm
        # layers stay on those moments: at batch 32 the per-batch moment
        # jitter is a common-mode kick bigger than the margins being trained.
        if epoch > 0 or cfg.freeze_tokenizer:
            norm_layers_eval(model)
        sums = {"total": 0.0, "nce": 0.0, "syn": 0.0}
        steps = 0
        for partner in pair_kinds:
            pool = eligible[partner]
            by_id: dict[int, list] = {}
            for t in pool:
                by_id.setdefault(t.identity_id, []).append(t)
            order = rng.permutation(len(pool))
            for chunk in _chunks(order, cfg.batch_size):
                if len(chunk) < 2:
                    continue
                batch_a = [pool[i] for i in chunk]
                # partner side comes from a different view of the same identity
                # wherever one exists: same-view pairs let the loss latch onto
                # shared pose/noise instead of identity.
                batch_b = []
                for t in batch_a:
                    mates = [u for u in by_id[t.identity_id] if u is not t]
                    batch_b.append(mates[int(rng.integers(len(mates)))] if mates else t)
                labels = torch.tensor([t.identity_id for t in batch_a])
                if partner == T:
                    view_a = model.embed_tuples(batch_a, use_kinds={R},
                                                fill="synthesized", synth_kinds=(S, I))
                    view_b = model.embed_tuples(batch_b, use_kinds={T},
                                                fill="synthesized", synth_kinds=(S, I))
                else:
                    view_a = model.embed_tuples(batch_a, use_kinds={R}, fill="mask")
                    view_b = model.embed_tuples(batch_b, use_kinds={partner}, fill="mask")

                nce = info_nce(view_a.final, view_b.final, labels,
                               temperature=cfg.temperature)
                src_r = view_a.pooled[R].detach()
                tgt_p = view_b.pooled[partner].detach()
                syn = 0.5 * (
                    synthesis_loss(model.synthesizer.synthesize({R: src_r}, partner), tgt_p)
                    + synthesis_loss(model.synthesizer.synthesize({partner: tgt_p}, R), src_r)
                )
                loss = nce + cfg.lambda_syn * syn
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(epoch, f"{partner.value} batch: {loss.item()}")

                opt.zero_grad()
                loss.backward()
                opt.step()
                sums["total"] += loss.item()
                sums["nce"] += nce.item()
                sums["syn"] += syn.item()
                steps += 1

        model.eval()
        probe_emb, probe_labels, probe_tags = _probe_embeddings(model, probe_tuples)
        tri = triplet_satisfaction(probe_emb, probe_labels, probe_tags)
        record = EpochRecord(
            epoch=epoch,
            phase=phase,
            loss_total=sums["total"] / max(steps, 1),
            loss_nce=sums["nce"] / max(steps, 1),
            loss_syn=sums["syn"] / max(steps, 1),
            triplet_satisfaction=tri,
        )
        log.records.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if epoch == 0:
            calibrate(model, train_tuples, cfg)
    return model, log
