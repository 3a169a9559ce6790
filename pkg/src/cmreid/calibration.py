"""Closed-form geometry fitting run once, after the burn-in epoch.

The toy schedule affords a couple hundred SGD steps. That is enough to polish
an embedding space but nowhere near enough to build one: rotating infrared
and sketch cues into the RGB arrangement, stretching the word table into
image space, and equalizing the wildly anisotropic color statistics are all
*linear* problems, so we solve them in closed form on the training split and
let gradient descent start from the solution.

Order of operations, each gated by the matching freeze flag:

1. settle the stems' batch-norm running moments with plain forward passes
   (epoch 0 ran with batch statistics; later epochs switch the split-norm
   layers to their settled running moments, because batch-32 moment jitter is
   a common-mode kick larger than the fine inter-identity margins);
2. whiten the RGB stem's box dims on corpus statistics, folded into conv2,
   so every identity direction carries comparable contrast for the loss;
3. ridge-fit a per-kind linear map from infrared/sketch box cues onto the
   whitened RGB centroids and fold it into that kind's conv2 (this is what
   per-modality stems exist for);
4. pin every stem's reserved lift dim to a constant, lifting the centered
   cue cloud onto a spherical cap so no identity sits at the origin where
   its direction is unstable;
5. least-squares the text table so each description's token sum lands on its
   identity's RGB centroid;
6. refit the synthesizer's per-source blocks so synthesized cues predict the
   target kind's centroid from any subset of present sources.

Every fit is deterministic (LAPACK via numpy, float64) and consumes no RNG.
"""

from __future__ import annotations

import numpy as np
import torch

from .datamodel import PAD_ID, KIND_ORDER, ModalityKind
from .model import ReidModel
from .token_mapper import (
    BOX_DIMS,
    LIFT_DIM,
    Ibn2d,
    TokenEmbeddingTable,
    align_channels,
    has_boxcar_layout,
    thermometer_channels,
)

R, S, I, T = ModalityKind.R, ModalityKind.S, ModalityKind.I, ModalityKind.T

_RIDGE = 1e-3  # relative to the leading eigenvalue; caps whitening gain ~sqrt(1/ridge)
_SETTLE_PASSES = 8

__all__ = ["calibrate", "norm_layers_eval"]


def norm_layers_eval(model: ReidModel):
    """Put split-norm layers on running statistics while the rest stays in train mode."""
    for mod in model.modules():
        if isinstance(mod, Ibn2d):
            mod.eval()


def _subset(tuples, kind):
    return [t for t in tuples if kind in t.presence]


def _pooled(model, tuples, kind) -> torch.Tensor:
    out = model.embed_tuples(tuples, use_kinds={kind}, fill="mask")
    return out.pooled[kind]


def _centroids(cue: torch.Tensor, ids: list[int]) -> tuple[np.ndarray, list[int]]:
    """Per-identity means in sorted-id order, float64 (K, D)."""
    arr = cue.double().numpy()
    uniq = sorted(set(ids))
    idx = np.asarray(ids)
    cent = np.stack([arr[idx == k].mean(axis=0) for k in uniq])
    return cent, uniq


def _box_block(stem):
    lo, hi = min(BOX_DIMS), max(BOX_DIMS) + 1
    return stem.conv2.weight, stem.conv2.bias, lo, hi


def _ridge_solve(X: np.ndarray, Y: np.ndarray, rel: float = _RIDGE) -> np.ndarray:
    """min ||XW - Y||^2 + a||W||^2 with a relative to the gram's top eigenvalue.

    A plain pinv would happily put enormous weight on directions the source
    barely spans (infrared box cues are near rank-2: r=g=b=luma), and the
    amplified junk then dwarfs everything downstream. The relative ridge caps
    the gain at ~sqrt(1/rel) regardless of the source's conditioning.
    """
    gram = X.T @ X
    top = float(np.linalg.eigvalsh(gram)[-1])
    return np.linalg.solve(gram + (rel * top + 1e-12) * np.eye(gram.shape[0]), X.T @ Y)


def _tsvd_solve(X: np.ndarray, Y: np.ndarray, floor: float) -> np.ndarray:
    """Least squares through the singular directions of X above ``floor``.

    Ridge shrinkage is the wrong shape for cross-kind alignment: the real
    source directions sit orders of magnitude below the top eigenvalue and a
    relative ridge crushes them along with the junk. Hard truncation at a
    noise-derived floor keeps full gain on every direction the data actually
    supports and refuses to use the rest at all.
    """
    U, sig, Vt = np.linalg.svd(X, full_matrices=False)
    keep = sig > floor
    if not keep.any():
        return np.zeros((X.shape[1], Y.shape[1]))
    U, sig, Vt = U[:, keep], sig[keep], Vt[keep]
    return Vt.T @ np.diag(1.0 / sig) @ (U.T @ Y)


def _fold_weights(stem, A: np.ndarray):
    """Left-multiply the box rows of conv2 (weight and bias) by A, in place."""
    w2, b2, lo, hi = _box_block(stem)
    At = torch.from_numpy(A).to(w2.dtype)
    w2.data[lo:hi] = torch.einsum("ij,jkhw->ikhw", At, w2.data[lo:hi].clone())
    b2.data[lo:hi] = At @ b2.data[lo:hi].clone()


def _shift_box_bias(stem, delta: torch.Tensor):
    _, b2, lo, hi = _box_block(stem)
    b2.data[lo:hi] += delta.to(b2.dtype)


def _set_thermometer(model, tuples, kind) -> None:
    """Spread the luma ladder's thresholds over the kind's own z-range.

    The init ladder covers fixed standard-normal quantiles, which is the
    right shape for a symmetric distribution and the wrong one for these:
    infrared mass sits in a narrow high band over a dark floor, sketches are
    a white field with a thin dark tail. Thresholds outside the band where
    identities actually differ contribute constant channels (no rank), so
    re-place them uniformly over the observed patch-z range, clipped at the
    1st/99th percentile to keep noise outliers from stretching the ladder.
    """
    stem = model.image_tokenizers[kind.value]
    subset = _subset(tuples, kind)
    chans = thermometer_channels(stem)
    zs = []
    for t in subset:
        img = align_channels(t.samples[kind])
        x = torch.from_numpy(np.ascontiguousarray(img.pixels)).permute(2, 0, 1).float()
        pre = stem.norm.normalize(stem.conv1(x.unsqueeze(0)))
        zs.append(pre[0, chans[0]].reshape(-1))
    z = torch.cat(zs).double().numpy()
    lo, hi = np.quantile(z, 0.01), np.quantile(z, 0.99)
    if hi - lo < 1e-6:
        return
    for ch, theta in zip(chans, np.linspace(lo, hi, len(chans))):
        stem.norm.bias.data[ch] = -float(theta)


def _whiten_stem(model, tuples, kind) -> None:
    """Whiten the box dims of ``kind``'s stem on *within-identity* scatter.

    Whitening the total covariance would be wrong twice over: it hands the
    largest gain to near-constant directions (a threshold channel the corpus
    never crosses has ~zero variance, and 1/sqrt(ridge) of pure noise then
    drowns the code), and it caps every real direction's contribution at unit
    scale no matter how clean it is. Normalizing the within-identity scatter
    instead puts unit noise on every live direction and lets a direction's
    reach grow with its actual signal-to-noise; constant channels have no
    within variance to amplify and simply center away to zero.

    The bias correction is empirical: the pooled cue is the conv path plus a
    constant from the rest of the forward (positional rows and friends), so
    deriving the new bias algebraically from conv2 alone would scale that
    constant by the fold and leave a large common-mode offset on every cue.
    Re-measuring after the weight fold sidesteps the whole question.
    """
    subset = _subset(tuples, kind)
    cue = _pooled(model, subset, kind)
    X = cue.double().numpy()[:, list(BOX_DIMS)]
    cent, ids = _centroids(torch.from_numpy(X), [t.identity_id for t in subset])
    idx = np.asarray([t.identity_id for t in subset])
    within = np.concatenate([X[idx == k] - cent[ids.index(k)] for k in ids])
    cov = within.T @ within / len(within)
    lam, V = np.linalg.eigh(cov)
    lam = lam + _RIDGE * lam.max() + 1e-12
    M = V @ np.diag(lam ** -0.5) @ V.T
    stem = model.image_tokenizers[kind.value]
    _fold_weights(stem, M)
    after = _pooled(model, subset, kind)
    _shift_box_bias(stem, -after.mean(dim=0)[list(BOX_DIMS)])


def _align_stem(model, tuples, kind, ref_cent: np.ndarray, ref_ids: list[int]) -> None:
    """Fit box cues of ``kind`` onto the reference centroids; fold into conv2.

    The truncation floor is where per-identity sampling noise alone would put
    a singular value of the centroid matrix: sqrt(K / views) times the within
    scatter, with a 2x margin. The margin is deliberately slim: the thin end
    of the real spectrum (the ladder's level contrasts) sits at 2-3x the
    noise scale, and rejecting those costs far more retrieval than the junk
    they let through.
    """
    subset = _subset(tuples, kind)
    cue = _pooled(model, subset, kind)
    sub_ids = [t.identity_id for t in subset]
    cent, ids = _centroids(cue, sub_ids)
    common = [k for k in ids if k in set(ref_ids)]
    if len(common) < 2:
        return
    src = cent[[ids.index(k) for k in common]][:, list(BOX_DIMS)]
    ref = ref_cent[[ref_ids.index(k) for k in common]][:, list(BOX_DIMS)]
    arr = cue.double().numpy()[:, list(BOX_DIMS)]
    idx = np.asarray(sub_ids)
    within = np.concatenate([arr[idx == k] - cent[ids.index(k), list(BOX_DIMS)]
                             for k in ids])
    views = len(subset) / max(len(ids), 1)
    floor = 2.0 * within.std() * np.sqrt(len(common) / max(views, 1.0))
    W = _tsvd_solve(src - src.mean(axis=0), ref - ref.mean(axis=0), floor)
    stem = model.image_tokenizers[kind.value]
    _fold_weights(stem, W.T)
    # empirical bias: land the per-identity means on the reference ones
    after, ids2 = _centroids(_pooled(model, subset, kind),
                             [t.identity_id for t in subset])
    gap = ref - after[[ids2.index(k) for k in common]][:, list(BOX_DIMS)]
    _shift_box_bias(stem, torch.from_numpy(gap.mean(axis=0)))


def _lift_and_center(model, tuples, kind, c0: float) -> None:
    """Constant lift dim plus zero mean on the leftover (non-box) dims."""
    stem = model.image_tokenizers[kind.value]
    w2, b2 = stem.conv2.weight, stem.conv2.bias
    w2.data[LIFT_DIM].zero_()
    b2.data[LIFT_DIM] = c0
    cue = _pooled(model, _subset(tuples, kind), kind)
    rest = [d for d in range(w2.shape[0]) if d not in BOX_DIMS and d != LIFT_DIM]
    b2.data[rest] -= cue.mean(dim=0)[rest]


def _fit_text_table(model, tuples, ref_cent: np.ndarray, ref_ids: list[int]) -> None:
    """Least-squares the token table onto the reference centroids.

    With the table zeroed, a text-only pass exposes the base contribution of
    positional rows; the remaining gap to the identity's centroid is linear
    in the table rows through the token histogram, so a pinv solve lands each
    description on its identity. (torch.linalg.lstsq is unreliable on the
    rank-deficient histogram matrix on CPU; numpy's SVD-based pinv is not.)
    """
    table = model.text_embedder.table.weight
    subset = _subset(tuples, T)
    by_id = {}
    for t in subset:
        by_id.setdefault(t.identity_id, t)
    common = [k for k in sorted(by_id) if k in set(ref_ids)]
    if len(common) < 2:
        return
    reps = [by_id[k] for k in common]
    table.data.zero_()
    base = _pooled(model, reps, T).double().numpy()
    hist = np.zeros((len(reps), table.shape[0]))
    for r, t in enumerate(reps):
        live = [i for i in t.samples[T].token_ids if i != PAD_ID]
        for tok in live:
            hist[r, tok] += 1.0 / len(live)
    target = ref_cent[[ref_ids.index(k) for k in common]] - base
    W = np.linalg.pinv(hist) @ target
    table.data.copy_(torch.from_numpy(W).to(table.dtype))


def _fit_synthesizer(model, tuples, cents: dict, ids: dict) -> None:
    """Per-source linear blocks predicting each target kind's centroid.

    For target k and source s the block maps the source's box+lift dims,
    centered, to the target centroid; the presence-flag column carries the
    target mean, so a sum over any subset of present sources stays a scaled
    copy of the target centroid with no constant residue.
    """
    d = model.synthesizer.embed_dim
    feat = list(BOX_DIMS) + [LIFT_DIM]
    for target in KIND_ORDER:
        if target not in cents:
            continue
        net = model.synthesizer.nets[target.value]
        net.weight.data.zero_()
        net.bias.data.zero_()
        sources = [k for k in KIND_ORDER if k != target]
        for i, src in enumerate(sources):
            if src not in cents:
                continue
            common = [k for k in ids[src] if k in set(ids[target])]
            if len(common) < 2:
                continue
            cs = cents[src][[ids[src].index(k) for k in common]][:, feat]
            ct = cents[target][[ids[target].index(k) for k in common]]
            mu_s, mu_t = cs.mean(axis=0), ct.mean(axis=0)
            W = _ridge_solve(cs - mu_s, ct - mu_t)        # (feat, D)
            wt = torch.from_numpy(W.T).to(net.weight.dtype)
            for col, dim in enumerate(feat):
                net.weight.data[:, i * d + dim] = wt[:, col]
            flag_col = len(sources) * d + i
            net.weight.data[:, flag_col] = torch.from_numpy(
                mu_t - W.T @ mu_s
            ).to(net.weight.dtype)


def calibrate(model: ReidModel, tuples, cfg) -> None:
    """Run every closed-form fit the freeze flags permit, in place."""
    if not tuples:
        return
    image_kinds = [k for k in (R, I, S) if _subset(tuples, k)]
    boxable = (model.cfg.tokenizer.embed_dim > LIFT_DIM
               and len(set(t.identity_id for t in tuples)) >= 2
               and all(has_boxcar_layout(model.image_tokenizers[k.value])
                       for k in image_kinds))

    if not cfg.freeze_tokenizer and image_kinds:
        model.train()
        with torch.no_grad():
            for _ in range(_SETTLE_PASSES):
                for kind in image_kinds:
                    _pooled(model, _subset(tuples, kind), kind)
    model.eval()
    if not boxable:
        return

    shared = model.cfg.share_image_tokenizer
    ref_cent = ref_ids = None
    with torch.no_grad():
        if not cfg.freeze_tokenizer:
            seen: set[int] = set()
            for kind in image_kinds:
                stem = model.image_tokenizers[kind.value]
                if id(stem) in seen:
                    continue
                seen.add(id(stem))
                _set_thermometer(model, tuples, kind)
        if not cfg.freeze_tokenizer and R in image_kinds:
            _whiten_stem(model, _subset(tuples, R), R)
            sub_r = _subset(tuples, R)
            cent_box, ids_r = _centroids(
                _pooled(model, sub_r, R)[:, list(BOX_DIMS)],
                [t.identity_id for t in sub_r],
            )
            # a modest constant lift keeps every identity's direction stable
            # without flattening the cosine margins the way a full-radius cap
            # would (short-signal identities would all point at the cap)
            c0 = 0.3 * float(np.median(np.linalg.norm(cent_box, axis=1)))
            if not shared:
                for kind in image_kinds:
                    if kind != R:
                        _align_stem(model, tuples, kind, cent_box, ids_r)
            for kind in (image_kinds if not shared else [R]):
                _lift_and_center(model, tuples, kind, c0)

        if R in image_kinds:
            sub_r = _subset(tuples, R)
            ref_cent, ref_ids = _centroids(
                _pooled(model, sub_r, R), [t.identity_id for t in sub_r]
            )

        if (not cfg.freeze_text and ref_cent is not None
                and isinstance(model.text_embedder, TokenEmbeddingTable)
                and _subset(tuples, T)):
            _fit_text_table(model, tuples, ref_cent, ref_ids)

        if not cfg.freeze_synthesizer:
            cents, ids = {}, {}
            for kind in KIND_ORDER:
                sub = _subset(tuples, kind)
                if len(sub) < 2:
                    continue
                cents[kind], ids[kind] = _centroids(
                    _pooled(model, sub, kind), [t.identity_id for t in sub]
                )
            _fit_synthesizer(model, tuples, cents, ids)
