"""Unified sequence layout, masked encoding, and pooled readout."""

from __future__ import annotations

import pytest
import torch

from cmreid.datamodel import KIND_ORDER, ModalityKind
from cmreid.errors import (
    DimMismatch,
    EmptySegment,
    HeadDivisibility,
    InvalidSpec,
    UnknownPolicy,
)
from cmreid.token_mapper import TokenSequence
from cmreid.unified_encoder import (
    Attention,
    EncoderConfig,
    FillPolicy,
    Readout,
    SequenceAssembler,
    SequenceLayout,
    TransformerEncoder,
    UnifiedSequence,
    pool_and_readout,
    pool_segments,
    pool_segments_batch,
)

D = 64


def seg(kind: ModalityKind, rows=16, dim=D, pad_from=None, gen=None) -> TokenSequence:
    g = gen or torch.Generator().manual_seed(kind.order + 1)
    tokens = torch.randn(rows, dim, generator=g)
    mask = torch.ones(rows, dtype=torch.bool)
    if pad_from is not None:
        mask[pad_from:] = False
    return TokenSequence(tokens=tokens, kind=kind, valid_mask=mask)


def full_segments(pad_from=9):
    return {
        ModalityKind.R: seg(ModalityKind.R),
        ModalityKind.S: seg(ModalityKind.S),
        ModalityKind.I: seg(ModalityKind.I),
        ModalityKind.T: seg(ModalityKind.T, pad_from=pad_from),
    }


# ---------------------------------------------------------------------------
# layout and assembly
# ---------------------------------------------------------------------------

def test_default_layout_has_65_rows():
    # [TRIVIAL] 1 aggregate + 4 segments of 16.
    layout = SequenceLayout()
    assert layout.total_rows == 65
    assert layout.spans == {
        ModalityKind.R: (1, 17),
        ModalityKind.S: (17, 33),
        ModalityKind.I: (33, 49),
        ModalityKind.T: (49, 65),
    }


def test_positional_table_is_per_row():
    # [PAPER] the positional table spans all n+1 rows: 65 x 64 at defaults.
    asm = SequenceAssembler(D)
    assert asm.positional.shape == (65, D)


def test_assemble_full_presence():
    asm = SequenceAssembler(D)
    seq = asm.assemble(full_segments(), fill="mask")
    assert seq.rows.shape == (65, D)
    assert seq.present == frozenset(KIND_ORDER)
    assert bool(seq.attention_mask[0])
    # text padding masked even though the modality is present
    t0, t1 = seq.segment_spans[ModalityKind.T]
    assert seq.attention_mask[t0 : t0 + 9].all()
    assert not seq.attention_mask[t0 + 9 : t1].any()
    assert seq.attention_mask[1:t0].all()


def test_sequence_length_ignores_availability():
    # [TRIVIAL] layout is fixed; presence only moves the mask.
    asm = SequenceAssembler(D)
    only_r = asm.assemble({ModalityKind.R: seg(ModalityKind.R)}, fill="mask")
    everything = asm.assemble(full_segments(), fill="mask")
    assert only_r.rows.shape == everything.rows.shape
    assert only_r.attention_mask.shape == everything.attention_mask.shape


def test_mask_fill_masks_exactly_the_absent_span():
    asm = SequenceAssembler(D)
    segs = full_segments()
    del segs[ModalityKind.I]
    seq = asm.assemble(segs, fill="mask")
    i0, i1 = seq.segment_spans[ModalityKind.I]
    assert not seq.attention_mask[i0:i1].any()
    assert seq.attention_mask[1:i0].all()
    assert ModalityKind.I not in seq.present


def test_zero_fill_is_visible_and_zero_before_positions():
    asm = SequenceAssembler(D)
    with torch.no_grad():
        asm.positional.normal_(generator=torch.Generator().manual_seed(0))
    segs = {ModalityKind.R: seg(ModalityKind.R)}
    seq = asm.assemble(segs, fill="zero")
    s0, s1 = seq.segment_spans[ModalityKind.S]
    assert seq.attention_mask[s0:s1].all()
    assert torch.allclose(seq.rows[s0:s1], asm.positional[s0:s1])


def test_learned_token_fill_broadcasts_fill_token():
    asm = SequenceAssembler(D)
    with torch.no_grad():
        asm.fill_tokens.normal_(generator=torch.Generator().manual_seed(1))
    seq = asm.assemble({ModalityKind.R: seg(ModalityKind.R)}, fill="learned_token")
    i0, i1 = seq.segment_spans[ModalityKind.I]
    expected = asm.fill_tokens[ModalityKind.I.order] + asm.positional[i0:i1]
    assert torch.allclose(seq.rows[i0:i1], expected)
    assert seq.attention_mask[i0:i1].all()


def test_synthesized_fill_broadcasts_vector():
    asm = SequenceAssembler(D)
    pseudo = torch.randn(D, generator=torch.Generator().manual_seed(2))
    seq = asm.assemble(
        {ModalityKind.R: seg(ModalityKind.R)},
        fill="synthesized",
        synthesized={k: pseudo for k in KIND_ORDER if k != ModalityKind.R},
    )
    s0, s1 = seq.segment_spans[ModalityKind.S]
    assert torch.allclose(seq.rows[s0:s1], pseudo + asm.positional[s0:s1])
    assert seq.attention_mask[s0:s1].all()


def test_synthesized_fill_masks_kinds_without_rows():
    # absent kinds with no pseudo rows fall back to attention exclusion
    asm = SequenceAssembler(D)
    seq = asm.assemble({ModalityKind.R: seg(ModalityKind.R)}, fill="synthesized",
                       synthesized={ModalityKind.S: torch.randn(D)})
    s0, s1 = seq.segment_spans[ModalityKind.S]
    i0, i1 = seq.segment_spans[ModalityKind.I]
    assert seq.attention_mask[s0:s1].all()
    assert not seq.attention_mask[i0:i1].any()


def test_synthesized_fill_rejects_wrong_shape():
    asm = SequenceAssembler(D)
    bad = {k: torch.randn(3, D) for k in KIND_ORDER}
    with pytest.raises(DimMismatch):
        asm.assemble({ModalityKind.R: seg(ModalityKind.R)}, fill="synthesized",
                     synthesized=bad)


def test_unknown_policy_rejected():
    asm = SequenceAssembler(D)
    with pytest.raises(UnknownPolicy):
        asm.assemble(full_segments(), fill="interpolate")
    with pytest.raises(UnknownPolicy):
        FillPolicy.parse("nope")


def test_dim_and_length_mismatches_rejected():
    asm = SequenceAssembler(D)
    with pytest.raises(DimMismatch):
        asm.assemble({ModalityKind.R: seg(ModalityKind.R, dim=32)})
    with pytest.raises(DimMismatch):
        asm.assemble({ModalityKind.R: seg(ModalityKind.R, rows=8)})


def test_positional_table_added_to_every_row():
    asm = SequenceAssembler(D)
    segs = full_segments()
    base = asm.assemble(segs, fill="mask").rows
    with torch.no_grad():
        asm.positional.normal_(generator=torch.Generator().manual_seed(3))
    shifted = asm.assemble(segs, fill="mask").rows
    assert torch.allclose(shifted - base, asm.positional, atol=1e-6)


def test_assemble_batch_stacks_singles():
    asm = SequenceAssembler(D)
    dicts = [full_segments(), {ModalityKind.R: seg(ModalityKind.R)}]
    rows, mask, seqs = asm.assemble_batch(dicts, fill="mask")
    assert rows.shape == (2, 65, D)
    assert mask.shape == (2, 65)
    assert torch.equal(rows[0], seqs[0].rows)
    assert torch.equal(mask[1], seqs[1].attention_mask)


def test_unified_sequence_validation():
    with pytest.raises(InvalidSpec):
        UnifiedSequence(
            rows=torch.zeros(5, D),
            segment_spans={},
            attention_mask=torch.zeros(5, dtype=torch.bool),
            present=frozenset(),
        )
    with pytest.raises(DimMismatch):
        UnifiedSequence(
            rows=torch.zeros(5, D),
            segment_spans={},
            attention_mask=torch.ones(4, dtype=torch.bool),
            present=frozenset(),
        )


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def test_encode_preserves_shape():
    torch.manual_seed(20)
    enc = TransformerEncoder(EncoderConfig()).eval()
    rows = torch.randn(65, D)
    mask = torch.ones(65, dtype=torch.bool)
    out = enc(rows, mask)
    assert out.shape == rows.shape
    batch = enc(rows.expand(3, -1, -1), mask.expand(3, -1))
    assert batch.shape == (3, 65, D)


def test_depth_zero_is_identity():
    enc = TransformerEncoder(EncoderConfig(depth=0))
    rows = torch.randn(9, D)
    assert torch.equal(enc(rows, torch.ones(9, dtype=torch.bool)), rows)


def test_masked_rows_cannot_influence_unmasked_outputs():
    # perturb only masked rows; every unmasked output must be unchanged
    torch.manual_seed(21)
    enc = TransformerEncoder(EncoderConfig()).eval()
    gen = torch.Generator().manual_seed(22)
    for _ in range(10):
        rows = torch.randn(65, D, generator=gen)
        mask = torch.rand(65, generator=gen) > 0.4
        mask[0] = True
        noised = rows.clone()
        noised[~mask] += torch.randn((~mask).sum().item(), D, generator=gen) * 10
        a = enc(rows, mask)
        b = enc(noised, mask)
        assert (a[mask] - b[mask]).abs().max() < 1e-6


def test_eval_encode_is_deterministic():
    torch.manual_seed(23)
    enc = TransformerEncoder(EncoderConfig()).eval()
    rows = torch.randn(2, 65, D)
    mask = torch.ones(2, 65, dtype=torch.bool)
    assert torch.equal(enc(rows, mask), enc(rows, mask))


def test_head_divisibility_enforced():
    with pytest.raises(HeadDivisibility):
        TransformerEncoder(EncoderConfig(embed_dim=30, heads=4))
    with pytest.raises(HeadDivisibility):
        Attention(30, 4)


def test_frozen_encoder_has_no_trainable_parameters():
    enc = TransformerEncoder(EncoderConfig(frozen=True))
    assert all(not p.requires_grad for p in enc.parameters())
    assert sum(1 for _ in enc.parameters()) > 0


def test_encoder_rejects_wrong_dim():
    enc = TransformerEncoder(EncoderConfig())
    with pytest.raises(DimMismatch):
        enc(torch.randn(5, 32), torch.ones(5, dtype=torch.bool))


# ---------------------------------------------------------------------------
# pooling and readout
# ---------------------------------------------------------------------------

def test_pooling_mean_of_identical_rows_is_that_row():
    # [TRIVIAL] mean of copies of v equals v.
    asm = SequenceAssembler(D)
    segs = full_segments()
    v = torch.full((D,), 0.25)
    segs[ModalityKind.R] = TokenSequence(
        tokens=v.expand(16, -1).clone(), kind=ModalityKind.R,
        valid_mask=torch.ones(16, dtype=torch.bool),
    )
    seq = asm.assemble(segs, fill="mask")
    pooled = pool_segments(seq.rows - asm.positional, seq)
    assert torch.allclose(pooled[ModalityKind.R], v, atol=1e-6)


def test_pooling_skips_absent_and_errors_on_empty_present():
    asm = SequenceAssembler(D)
    segs = {ModalityKind.R: seg(ModalityKind.R)}
    seq = asm.assemble(segs, fill="mask")
    pooled = pool_segments(seq.rows, seq)
    assert set(pooled) == {ModalityKind.R}

    broken = UnifiedSequence(
        rows=seq.rows,
        segment_spans=seq.segment_spans,
        attention_mask=seq.attention_mask.clone(),
        present=frozenset({ModalityKind.R, ModalityKind.S}),
    )
    with pytest.raises(EmptySegment):
        pool_segments(broken.rows, broken)


def test_text_pooling_averages_only_valid_rows():
    asm = SequenceAssembler(D)
    segs = full_segments(pad_from=4)
    seq = asm.assemble(segs, fill="mask")
    pooled = pool_segments(seq.rows, seq)
    t0, _ = seq.segment_spans[ModalityKind.T]
    manual = seq.rows[t0 : t0 + 4].mean(dim=0)
    assert torch.allclose(pooled[ModalityKind.T], manual, atol=1e-6)


def test_batched_pooling_matches_single():
    asm = SequenceAssembler(D)
    dicts = [full_segments(), {ModalityKind.R: seg(ModalityKind.R)}]
    rows, mask, seqs = asm.assemble_batch(dicts, fill="mask")
    pooled_b, has = pool_segments_batch(rows, mask, asm.layout.spans)
    single = pool_segments(seqs[0].rows, seqs[0])
    for kind in KIND_ORDER:
        assert torch.allclose(pooled_b[kind][0], single[kind], atol=1e-6)
    assert bool(has[ModalityKind.R][1])
    assert not bool(has[ModalityKind.T][1])


def test_readout_final_is_unit_norm():
    torch.manual_seed(24)
    readout = Readout(D, 48)
    x = torch.randn(10, D) * 7
    out = readout(x)
    assert out.shape == (10, 48)
    assert (out.norm(dim=-1) - 1).abs().max() < 1e-6


def test_readout_scale_invariance_of_normalization():
    # normalize(a * v) == normalize(v) for a > 0
    torch.manual_seed(25)
    readout = Readout(D, 32)
    v = readout.proj(torch.randn(5, D))
    from cmreid.nn_ops import l2_normalize

    assert torch.allclose(l2_normalize(v * 3.7), l2_normalize(v), atol=1e-6)


def test_pool_and_readout_assembles_everything():
    torch.manual_seed(26)
    asm = SequenceAssembler(D)
    enc = TransformerEncoder(EncoderConfig()).eval()
    readout = Readout(D, D)
    seq = asm.assemble(full_segments(), fill="mask")
    encoded = enc(seq.rows, seq.attention_mask)
    pooled = pool_and_readout(encoded, seq, readout)
    assert torch.equal(pooled.aggregate, encoded[0])
    assert set(pooled.per_modality) == set(KIND_ORDER)
    assert pooled.final.shape == (D,)
    assert abs(pooled.final.norm().item() - 1) < 1e-6
    # a supplied fused vector overrides the aggregate for the final readout
    fused = torch.randn(D)
    alt = pool_and_readout(encoded, seq, readout, fused=fused)
    assert not torch.allclose(alt.final, pooled.final)
