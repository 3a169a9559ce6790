"""Losses, the triplet metric, and the two-phase loop.

Loss oracles here are hand-derived from the definition: with identity
similarity matrix at temperature 1 each row's log-likelihood is
-log(e / (e + (B-1))), and with all-equal similarities the softmax is
uniform so the loss is log B regardless of which entries are positive.
"""

import math

import numpy as np
import pytest
import torch

from cmreid.datamodel import CorpusSpec, ModalityKind, generate_corpus
from cmreid.errors import (
    EmptyCorpus,
    InsufficientClasses,
    InvalidSpec,
    NoPositive,
)
from cmreid.model import ModelConfig, build_model
from cmreid.cue_fusion import FusionConfig
from cmreid.token_mapper import TokenizerConfig
from cmreid.unified_encoder import EncoderConfig
from cmreid.training import (
    EpochRecord,
    TrainConfig,
    TrainLog,
    info_nce,
    train,
    triplet_satisfaction,
)

R, S, I, T = ModalityKind.R, ModalityKind.S, ModalityKind.I, ModalityKind.T


# ---------------------------------------------------------------------------
# info_nce
# ---------------------------------------------------------------------------

def test_info_nce_orthonormal_pairs_oracle():
    # [DERIVED] identity sims at tau=1: per row loss = log(1 + (B-1)e^-1);
    # B=2 gives log(1 + e^-1) = 0.31326168751822286
    emb = torch.eye(2)
    loss = info_nce(emb, emb, [0, 1], temperature=1.0)
    assert abs(loss.item() - 0.31326168751822286) < 1e-6


def test_info_nce_identical_embeddings_uniform_oracle():
    # [DERIVED] all sims equal -> softmax uniform -> loss = log B, B=2
    v = torch.tensor([[0.6, 0.8], [0.6, 0.8]])
    loss = info_nce(v, v, [0, 1], temperature=0.07)
    assert abs(loss.item() - math.log(2.0)) < 1e-6


def test_info_nce_all_positive_uniform_oracle():
    # [DERIVED] every column a positive, sims equal: mean log-likelihood
    # over positives is still -log(1/B) -> log B, here B=5
    v = torch.ones(5, 3) / math.sqrt(3.0)
    loss = info_nce(v, v, [7, 7, 7, 7, 7], temperature=0.5)
    assert abs(loss.item() - math.log(5.0)) < 1e-6


def test_info_nce_orthogonal_transform_invariance():
    gen = torch.Generator().manual_seed(2)
    a = torch.nn.functional.normalize(torch.randn(8, 6, generator=gen), dim=1)
    b = torch.nn.functional.normalize(torch.randn(8, 6, generator=gen), dim=1)
    labels = [0, 0, 1, 1, 2, 2, 3, 3]
    q, _ = torch.linalg.qr(torch.randn(6, 6, generator=gen))
    base = info_nce(a, b, labels)
    rotated = info_nce(a @ q, b @ q, labels)
    assert abs(base.item() - rotated.item()) < 1e-6


def test_info_nce_symmetry_under_argument_swap():
    gen = torch.Generator().manual_seed(3)
    a = torch.nn.functional.normalize(torch.randn(5, 4, generator=gen), dim=1)
    b = torch.nn.functional.normalize(torch.randn(6, 4, generator=gen), dim=1)
    la, lb = [0, 1, 2, 0, 1], [0, 1, 2, 2, 1, 0]
    assert abs(info_nce(a, b, la, lb).item() - info_nce(b, a, lb, la).item()) < 1e-6


def test_info_nce_multi_positive_rows():
    # two positives for row 0; loss must average their log-likelihoods,
    # not sum them, so it stays bounded by log B
    emb_a = torch.eye(3)
    emb_b = torch.eye(3)
    loss = info_nce(emb_a, emb_b, [0, 0, 1], [0, 0, 1], temperature=1.0)
    assert loss.item() < math.log(3.0) + 1.0


def test_info_nce_no_positive_row_raises():
    emb = torch.eye(2)
    with pytest.raises(NoPositive):
        info_nce(emb, emb, [0, 1], [2, 3])


def test_info_nce_no_positive_column_raises():
    a = torch.eye(2)
    b = torch.eye(3)[:, :2]
    with pytest.raises(NoPositive):
        info_nce(a, b, [0, 1], [0, 1, 5])


def test_info_nce_rejects_bad_temperature():
    emb = torch.eye(2)
    with pytest.raises(InvalidSpec):
        info_nce(emb, emb, [0, 1], temperature=0.0)


def test_info_nce_gradient_flows_to_both_sides():
    a = torch.nn.functional.normalize(torch.randn(4, 3), dim=1).requires_grad_(True)
    b = torch.nn.functional.normalize(torch.randn(4, 3), dim=1).requires_grad_(True)
    info_nce(a, b, [0, 1, 0, 1]).backward()
    assert a.grad is not None and a.grad.abs().sum() > 0
    assert b.grad is not None and b.grad.abs().sum() > 0


# ---------------------------------------------------------------------------
# triplet satisfaction
# ---------------------------------------------------------------------------

def test_triplet_perfect_separation_is_one():
    emb = torch.tensor([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
    assert triplet_satisfaction(emb, [0, 0, 1, 1]) == 1.0


def test_triplet_total_violation_is_zero():
    # [DERIVED] every query's positive sim (0) never exceeds its negative
    # sims (1 and 0; the tie counts against)
    emb = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    assert triplet_satisfaction(emb, [0, 0, 1, 1]) == 0.0


def test_triplet_half_satisfied_oracle():
    # [DERIVED] q0: pos 0.8 > neg 0.6 ok; q1: pos 0.8 < neg 0.96 violated
    emb = torch.tensor([[1.0, 0.0], [0.8, 0.6], [0.6, 0.8]])
    assert triplet_satisfaction(emb, [0, 0, 1]) == 0.5


def test_triplet_tie_counts_as_violation():
    emb = torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    # q0: pos sim 0 vs neg sim 0 -> tie -> violation; q1: pos 0 vs neg 1
    assert triplet_satisfaction(emb, [0, 0, 1]) == 0.0


def test_triplet_rescaling_invariance():
    gen = torch.Generator().manual_seed(4)
    emb = torch.randn(12, 5, generator=gen)
    labels = np.arange(12) % 3
    assert triplet_satisfaction(emb, labels) == triplet_satisfaction(emb * 7.3, labels)


def _brute_force_satisfaction(emb, labels, tags):
    # independent reference: enumerate every (query, positive, negative)
    # triple under the cross-tag eligibility rule
    e = torch.nn.functional.normalize(torch.as_tensor(emb, dtype=torch.float64), dim=1)
    sims = (e @ e.T).numpy()
    sat = tot = 0
    n = len(labels)
    for q in range(n):
        for g in range(n):
            if g == q or labels[g] != labels[q]:
                continue
            if tags is not None and tags[g] == tags[q]:
                continue
            for h in range(n):
                if labels[h] == labels[q]:
                    continue
                if tags is not None and tags[h] == tags[q]:
                    continue
                tot += 1
                sat += bool(sims[q, g] > sims[q, h])
    return sat / tot


def test_triplet_matches_brute_force_with_and_without_tags():
    # [DERIVED] exact agreement with the triple-loop reference
    gen = torch.Generator().manual_seed(5)
    emb = torch.randn(14, 4, generator=gen)
    labels = [i % 3 for i in range(14)]
    tags = ["abc"[i % 2] for i in range(14)]
    assert triplet_satisfaction(emb, labels) == _brute_force_satisfaction(emb, labels, None)
    assert triplet_satisfaction(emb, labels, tags) == _brute_force_satisfaction(emb, labels, tags)


def test_triplet_same_tag_positives_ineligible():
    # every identity's samples share one tag, so under the cross-tag rule
    # there is no eligible positive anywhere; without tags it is well posed
    emb = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    labels = [0, 0, 1, 1]
    tags = ["a", "a", "b", "b"]
    assert 0.0 <= triplet_satisfaction(emb, labels) <= 1.0
    with pytest.raises(InsufficientClasses):
        triplet_satisfaction(emb, labels, tags)


def test_triplet_single_class_raises():
    emb = torch.eye(3)
    with pytest.raises(InsufficientClasses):
        triplet_satisfaction(emb, [1, 1, 1])


def test_triplet_no_valid_triplets_under_tags_raises():
    emb = torch.eye(2)
    with pytest.raises(InsufficientClasses):
        # both samples share a tag, so no cross-tag candidate exists
        triplet_satisfaction(emb, [0, 1], ["x", "x"])


def test_triplet_sampled_path_tracks_exact():
    gen = torch.Generator().manual_seed(6)
    emb = torch.randn(60, 8, generator=gen)
    labels = np.arange(60) % 6
    exact = triplet_satisfaction(emb, labels)
    sampled = triplet_satisfaction(emb, labels, max_exact=10,
                                   sample_triplets=40_000, seed=3)
    assert abs(exact - sampled) < 0.02


def test_triplet_sampled_path_deterministic():
    gen = torch.Generator().manual_seed(7)
    emb = torch.randn(40, 6, generator=gen)
    labels = np.arange(40) % 4
    a = triplet_satisfaction(emb, labels, max_exact=5, sample_triplets=2000, seed=11)
    b = triplet_satisfaction(emb, labels, max_exact=5, sample_triplets=2000, seed=11)
    assert a == b


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def tiny_model_cfg():
    return ModelConfig(
        tokenizer=TokenizerConfig(stem_channels=4, embed_dim=16),
        encoder=EncoderConfig(depth=1, heads=2, embed_dim=16, final_dim=16),
        fusion=FusionConfig(heads=2, gate_hidden=16),
        image_size=16,
    )


def tiny_corpus(num_identities=6, views=2, seed=5, availability=None):
    spec = CorpusSpec(
        num_identities=num_identities,
        views_per_identity=views,
        image_size=16,
        seed=seed,
        availability=availability or {R: 1.0, S: 1.0, I: 1.0, T: 1.0},
    )
    return generate_corpus(spec)


def test_train_produces_log_with_phases():
    corpus = tiny_corpus()
    cfg = TrainConfig(phase1_epochs=1, phase2_epochs=2, batch_size=4,
                      holdout_views=1, seed=1)
    model, log = train(corpus, cfg, tiny_model_cfg())
    assert [r.phase for r in log.records] == [1, 2, 2]
    assert [r.epoch for r in log.records] == [0, 1, 2]
    for rec in log.records:
        assert math.isfinite(rec.loss_total)
        assert math.isfinite(rec.loss_nce)
        assert math.isfinite(rec.loss_syn)
        assert 0.0 <= rec.triplet_satisfaction <= 1.0


def test_train_full_batch_loss_decreases():
    # full-batch gradient descent on a fixed batch: each epoch revisits the
    # same step, so the running loss must come down
    corpus = tiny_corpus()
    cfg = TrainConfig(phase1_epochs=3, phase2_epochs=0, batch_size=64,
                      learning_rate=0.05, holdout_views=1, seed=2)
    _, log = train(corpus, cfg, tiny_model_cfg())
    assert log.records[-1].loss_total < log.records[0].loss_total


def test_train_bit_deterministic():
    corpus = tiny_corpus()
    cfg = TrainConfig(phase1_epochs=1, phase2_epochs=1, batch_size=4,
                      holdout_views=1, seed=9)
    model_a, log_a = train(corpus, cfg, tiny_model_cfg())
    model_b, log_b = train(corpus, cfg, tiny_model_cfg())
    assert log_a == log_b
    sd_a, sd_b = model_a.state_dict(), model_b.state_dict()
    assert sd_a.keys() == sd_b.keys()
    for key in sd_a:
        assert torch.equal(sd_a[key], sd_b[key]), key


def test_frozen_synthesizer_parameters_unchanged():
    corpus = tiny_corpus()
    cfg = TrainConfig(phase1_epochs=1, phase2_epochs=1, batch_size=4,
                      holdout_views=1, seed=3, freeze_synthesizer=True)
    model, _ = train(corpus, cfg, tiny_model_cfg())
    reference = build_model(tiny_model_cfg(), seed=3)
    for (name, p), (_, q) in zip(
        model.synthesizer.named_parameters(), reference.synthesizer.named_parameters()
    ):
        assert torch.equal(p, q), name


def test_frozen_tokenizer_parameters_unchanged():
    corpus = tiny_corpus()
    cfg = TrainConfig(phase1_epochs=1, phase2_epochs=0, batch_size=4,
                      holdout_views=1, seed=4, freeze_tokenizer=True)
    model, _ = train(corpus, cfg, tiny_model_cfg())
    reference = build_model(tiny_model_cfg(), seed=4)
    for (name, p), (_, q) in zip(
        model.image_tokenizers.named_parameters(),
        reference.image_tokenizers.named_parameters(),
    ):
        assert torch.equal(p, q), name


def test_unfrozen_components_do_move():
    corpus = tiny_corpus()
    cfg = TrainConfig(phase1_epochs=1, phase2_epochs=1, batch_size=4,
                      holdout_views=1, seed=3)
    model, _ = train(corpus, cfg, tiny_model_cfg())
    reference = build_model(tiny_model_cfg(), seed=3)
    moved = any(
        not torch.equal(p, q)
        for (_, p), (_, q) in zip(model.named_parameters(), reference.named_parameters())
    )
    assert moved


def test_train_rejects_empty_corpus():
    corpus = tiny_corpus()
    corpus.tuples = []
    with pytest.raises(EmptyCorpus):
        train(corpus, TrainConfig(), tiny_model_cfg())


def test_train_rejects_holdout_consuming_everything():
    corpus = tiny_corpus(views=2)
    cfg = TrainConfig(holdout_views=2)
    with pytest.raises(EmptyCorpus):
        train(corpus, cfg, tiny_model_cfg())


def test_train_rejects_missing_text_for_phase1():
    corpus = tiny_corpus(availability={R: 1.0, S: 1.0, I: 1.0, T: 0.0})
    cfg = TrainConfig(phase1_epochs=1, phase2_epochs=1, batch_size=4, holdout_views=1)
    with pytest.raises(EmptyCorpus):
        train(corpus, cfg, tiny_model_cfg())


def test_train_rejects_all_frozen():
    corpus = tiny_corpus()
    cfg = TrainConfig(phase1_epochs=1, phase2_epochs=0, batch_size=4,
                      holdout_views=1, freeze_tokenizer=True, freeze_text=True,
                      freeze_encoder=True, freeze_synthesizer=True, freeze_fusion=True,
                      freeze_readout=True)
    with pytest.raises(InvalidSpec):
        train(corpus, cfg, tiny_model_cfg())


def test_train_config_validation():
    with pytest.raises(InvalidSpec):
        TrainConfig(temperature=-1.0).validate()
    with pytest.raises(InvalidSpec):
        TrainConfig(batch_size=1).validate()
    with pytest.raises(InvalidSpec):
        TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(InvalidSpec):
        TrainConfig(lambda_syn=-0.1).validate()


def test_trainlog_jsonl_round_trip(tmp_path):
    log = TrainLog(records=[
        EpochRecord(epoch=0, phase=1, loss_total=1.5, loss_nce=1.25,
                    loss_syn=0.5, triplet_satisfaction=0.625),
        EpochRecord(epoch=1, phase=2, loss_total=1.0, loss_nce=0.875,
                    loss_syn=0.25, triplet_satisfaction=0.75),
    ])
    path = str(tmp_path / "log.jsonl")
    log.save_jsonl(path)
    assert TrainLog.load_jsonl(path) == log


def test_on_epoch_callback_sees_every_record():
    corpus = tiny_corpus()
    cfg = TrainConfig(phase1_epochs=1, phase2_epochs=1, batch_size=4,
                      holdout_views=1, seed=6)
    seen = []
    _, log = train(corpus, cfg, tiny_model_cfg(), on_epoch=seen.append)
    assert seen == log.records
