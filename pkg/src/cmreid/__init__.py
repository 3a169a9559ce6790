"""Cross-modal person re-identification under uncertain modality availability.

The package covers the full loop on a procedural corpus: data generation
(:mod:`cmreid.datamodel`), per-modality tokenization (:mod:`cmreid.token_mapper`),
unified sequence encoding (:mod:`cmreid.unified_encoder`), synthetic-modality
augmentation (:mod:`cmreid.modality_synthesis`), gated cue fusion
(:mod:`cmreid.cue_fusion`), contrastive training (:mod:`cmreid.training`),
and retrieval evaluation (:mod:`cmreid.retrieval_eval`), glued together by a
command-line interface (:mod:`cmreid.cli`).
"""

__version__ = "0.1.0"
