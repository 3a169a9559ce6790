"""Per-modality token mappers.

Images go through a small two-stage convolutional stem whose normalization
mixes instance norm (first ceil(C*split) channels, sample-level statistics)
with batch norm (the rest, cross-sample statistics). Text goes through a
pluggable embedder; the shipped default is a learnable embedding table that
can be frozen to mimic an external pre-trained encoder.

Both mappers emit a ``TokenSequence``: a k x D float matrix plus a validity
mask (all true for images, false on text padding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .datamodel import VOCAB, PAD_ID, ImageSample, ModalityKind, TextSample
from .errors import (
    BadChannelCount,
    DegenerateBatch,
    InvalidSpec,
    OutOfVocabulary,
    ShapeMismatch,
)
from .nn_ops import relu


@dataclass
class TokenizerConfig:
    stem_channels: int = 16
    embed_dim: int = 64
    stride_1: int = 4
    stride_2: int = 2
    ibn_split: float = 0.5
    l_max: int = 16
    vocab_size: int = len(VOCAB)

    def validate(self):
        if self.embed_dim <= 0 or self.stem_channels <= 0:
            raise InvalidSpec("channel counts must be positive")
        if self.stride_1 < 1 or self.stride_2 < 1:
            raise InvalidSpec("strides must be >= 1")
        if not 0.0 < self.ibn_split < 1.0:
            raise InvalidSpec(f"ibn_split must lie in (0, 1), got {self.ibn_split}")
        if self.l_max < 1 or self.vocab_size < 1:
            raise InvalidSpec("l_max and vocab_size must be >= 1")

    @property
    def patch_stride(self) -> int:
        return self.stride_1 * self.stride_2


@dataclass
class TokenSequence:
    """k rows of D-dimensional tokens for one sample of one modality."""

    tokens: torch.Tensor
    kind: ModalityKind
    valid_mask: torch.Tensor

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ShapeMismatch(f"tokens must be k x D, got {tuple(self.tokens.shape)}")
        if self.valid_mask.shape != (self.tokens.shape[0],):
            raise ShapeMismatch("valid_mask length must equal token count")


def align_channels(img: ImageSample) -> ImageSample:
    """Replicate single-channel rasters to three channels; pass 3-channel through."""
    c = img.channels
    if c == 3:
        return img
    if c == 1:
        return ImageSample(pixels=np.repeat(img.pixels, 3, axis=2))
    raise BadChannelCount(f"expected 1 or 3 channels, got {c}")


class Ibn2d(nn.Module):
    """Split-channel normalization: instance norm first, batch norm second.

    The first ceil(C * split) channels are normalized per sample (mean/var over
    the spatial plane of each instance), the remainder per batch with running
    statistics used in eval mode. Variances are biased, with ``eps`` added
    inside the square root. A learnable affine spans all channels.
    """

    def __init__(self, num_channels: int, split: float = 0.5, eps: float = 1e-5,
                 momentum: float = 0.1):
        super().__init__()
        if num_channels < 1:
            raise InvalidSpec("num_channels must be >= 1")
        if not 0.0 < split < 1.0:
            raise InvalidSpec("split must lie in (0, 1)")
        self.num_channels = num_channels
        self.in_channels = math.ceil(num_channels * split)
        self.bn_channels = num_channels - self.in_channels
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.register_buffer("running_mean", torch.zeros(max(self.bn_channels, 1)))
        self.register_buffer("running_var", torch.ones(max(self.bn_channels, 1)))

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-affine normalization; exposed so statistics are directly testable."""
        if x.ndim != 4 or x.shape[1] != self.num_channels:
            raise ShapeMismatch(
                f"expected B x {self.num_channels} x H x W, got {tuple(x.shape)}"
            )
        if self.training and x.shape[0] < 2:
            raise DegenerateBatch(f"train-mode batch of {x.shape[0]} has undefined statistics")

        xi = x[:, : self.in_channels]
        mean_i = xi.mean(dim=(2, 3), keepdim=True)
        var_i = xi.var(dim=(2, 3), keepdim=True, unbiased=False)
        out_i = (xi - mean_i) / torch.sqrt(var_i + self.eps)

        if self.bn_channels == 0:
            return out_i

        xb = x[:, self.in_channels :]
        if self.training:
            mean_b = xb.mean(dim=(0, 2, 3))
            var_b = xb.var(dim=(0, 2, 3), unbiased=False)
            with torch.no_grad():
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean_b)
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * var_b)
        else:
            mean_b = self.running_mean
            var_b = self.running_var
        out_b = (xb - mean_b.view(1, -1, 1, 1)) / torch.sqrt(var_b.view(1, -1, 1, 1) + self.eps)
        return torch.cat([out_i, out_b], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.normalize(x)
        return out * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class ImageTokenizer(nn.Module):
    """conv(stride_1) -> split-channel norm -> ReLU -> conv(stride_2) -> flatten.

    A H x W image becomes (H/(stride_1*stride_2)) * (W/(...)) tokens of
    dimension ``embed_dim``, flattened row-major over the spatial grid.
    """

    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        # bias-free stem: the normalization right after subtracts any
        # constant channel shift, so a bias here could never train
        self.conv1 = nn.Conv2d(3, cfg.stem_channels, kernel_size=cfg.stride_1,
                               stride=cfg.stride_1, bias=False)
        self.norm = Ibn2d(cfg.stem_channels, split=cfg.ibn_split)
        self.conv2 = nn.Conv2d(cfg.stem_channels, cfg.embed_dim, kernel_size=cfg.stride_2,
                               stride=cfg.stride_2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Map B x 3 x H x W images to B x k x D token stacks."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected B x 3 x H x W, got {tuple(x.shape)}")
        stride = self.cfg.patch_stride
        if x.shape[2] % stride or x.shape[3] % stride:
            raise ShapeMismatch(
                f"image size {tuple(x.shape[2:])} not divisible by {stride}"
            )
        h = self.conv1(x)
        h = relu(self.norm(h))
        h = self.conv2(h)
        return h.flatten(2).transpose(1, 2)

    def token_count(self, size: int) -> int:
        return (size // self.cfg.patch_stride) ** 2


# Cue layout written by boxcar_init: conv2 output dims 0..15 carry pooled box
# features (the dims stem calibration whitens and aligns), dim 16 stays
# reserved for a constant-radius lift. Each box channel is a within-patch
# detector whose mean over the token grid survives global pooling:
#
#   r / g / b   one color plane's patch mean
#   luma        luminance patch mean
#   dx / dy     horizontal / vertical luminance gradient inside the patch
#   shape       luminance rung over the *instance*-normalized plane: a
#               within-image distribution quantile (silhouette/area code,
#               insensitive to absolute level)
#   abs         luminance rung over the *batch*-normalized plane: absolute
#               level against corpus statistics
#
# A rung ladder is several copies of the same detector distinguished only by
# the normalization-affine bias, so channel j reads relu(z - theta_j). The
# point: a linear map downstream can then place each level of z anywhere in
# embedding space, where a single linear channel only ever supports rank-1
# placements, which cosine ranking punishes.
#
# The batch-norm half differs per modality because the informative detectors
# differ: color planes are three copies of the same plane on replicated
# single-channel inputs, so infrared spends those channels on a finer level
# ladder and sketches on edge orientation (a hat and a backpack add similar
# line mass but in different directions).
BOX_DIMS = tuple(range(16))
LIFT_DIM = 16
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
_SHAPE_RUNGS = 8
_IN_ROLES = ["shape"] * _SHAPE_RUNGS
_BN_ROLES = {
    "R": ["r", "g", "b", "abs", "abs", "abs", "abs", "abs"],
    "I": ["abs", "abs", "abs", "abs", "abs", "abs", "abs", "abs"],
    "S": ["luma", "dx", "dy", "abs", "abs", "abs", "abs", "abs"],
}


def stem_roles(tok: ImageTokenizer, kind: str = "R") -> dict[int, str] | None:
    """Channel-index -> detector-role map, or None when the stem is too small.

    Box dim j < 8 reads conv1 channel j (instance-norm half); dims 8..15 read
    the first eight batch-norm channels. Stems are free to be wider; the
    layout only claims the first eight channels of each half.
    """
    w1, w2 = tok.conv1.weight, tok.conv2.weight
    bn_lo = tok.norm.in_channels
    if (bn_lo < _SHAPE_RUNGS or w1.shape[0] - bn_lo < 8 or w1.shape[1] != 3
            or w2.shape[0] <= LIFT_DIM or w2.shape[1] < bn_lo + 8):
        return None
    roles = dict(enumerate(_IN_ROLES))
    for j, role in enumerate(_BN_ROLES.get(kind, _BN_ROLES["R"])):
        roles[bn_lo + j] = role
    return roles


def has_boxcar_layout(tok: ImageTokenizer) -> bool:
    return stem_roles(tok) is not None


def box_channels(tok: ImageTokenizer) -> list[int]:
    """conv1 channels feeding box dims 0..15, in dim order."""
    bn_lo = tok.norm.in_channels
    return list(range(_SHAPE_RUNGS)) + list(range(bn_lo, bn_lo + 8))


def rung_ladders(tok: ImageTokenizer, kind: str = "R") -> list[list[int]]:
    """Groups of conv1 channels forming threshold ladders, per base detector."""
    roles = stem_roles(tok, kind)
    if roles is None:
        return []
    groups: dict[str, list[int]] = {}
    for ch, role in sorted(roles.items()):
        if role in ("shape", "abs"):
            groups.setdefault(role, []).append(ch)
    return [chans for chans in groups.values() if len(chans) > 1]


def _detector_taps(role: str, k: int) -> torch.Tensor:
    """3 x k x k conv1 taps for one detector role."""
    taps = torch.zeros(3, k, k)
    if role in ("r", "g", "b"):
        taps["rgb".index(role)] = 0.5
    elif role in ("luma", "shape", "abs"):
        for c, g in enumerate(LUMA_WEIGHTS):
            taps[c] = 0.5 * g
    elif role in ("dx", "dy"):
        ramp = torch.linspace(-1.0, 1.0, k)
        plane = ramp.view(1, k) if role == "dx" else ramp.view(k, 1)
        for c, g in enumerate(LUMA_WEIGHTS):
            taps[c] = g * plane
    return taps


def boxcar_init(tok: ImageTokenizer, kind: str = "R"):
    """Overwrite a stem with the detector layout for ``kind``.

    conv2 passes each box channel through to its own dim at gain 0.25;
    everything else is 0.02-scaled residue of the random draw. Rung ladders
    start at fixed thresholds skewed toward the upper tail (foreground mass
    sits above the background mode); calibration re-places them from data.
    Stems too small for the layout just get the scale-down, which silences
    the start the same way.
    """
    with torch.no_grad():
        w1 = tok.conv1.weight
        w2 = tok.conv2.weight
        w1.mul_(0.05)
        w2.mul_(0.02)
        roles = stem_roles(tok, kind)
        if roles is None:
            return
        k = w1.shape[2]
        for ch, role in roles.items():
            w1[ch] = _detector_taps(role, k)
        for ladder in rung_ladders(tok, kind):
            for ch, theta in zip(ladder, np.linspace(-1.0, 2.5, len(ladder))):
                tok.norm.bias[ch] = -float(theta)
        for dim, ch in enumerate(box_channels(tok)):
            w2[dim].zero_()
            w2[dim, ch] = 0.25


def image_to_tokens(img: ImageSample, kind: ModalityKind,
                    tokenizer: ImageTokenizer) -> TokenSequence:
    """Tokenize one image sample; channels are aligned to 3 first."""
    aligned = align_channels(img)
    x = torch.from_numpy(np.ascontiguousarray(aligned.pixels)).permute(2, 0, 1).float()
    tokens = tokenizer(x.unsqueeze(0)).squeeze(0)
    return TokenSequence(
        tokens=tokens,
        kind=kind,
        valid_mask=torch.ones(tokens.shape[0], dtype=torch.bool),
    )


class TextEmbedder(nn.Module):
    """Plug point for text encoders: token ids in, one D-vector per position out.

    ``frozen`` excludes the embedder's parameters from optimization, matching
    the contract of dropping in a fixed pre-trained encoder.
    """

    def __init__(self, frozen: bool = False):
        super().__init__()
        self.frozen = frozen

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:  # (B, L) -> (B, L, D)
        raise NotImplementedError


_TEXT_EMBEDDERS: dict[str, type] = {}


def register_text_embedder(name: str):
    def deco(cls):
        _TEXT_EMBEDDERS[name] = cls
        return cls
    return deco


def build_text_embedder(name: str, cfg: TokenizerConfig, frozen: bool = False) -> TextEmbedder:
    if name not in _TEXT_EMBEDDERS:
        raise InvalidSpec(f"unknown text embedder {name!r}; have {sorted(_TEXT_EMBEDDERS)}")
    return _TEXT_EMBEDDERS[name](cfg, frozen=frozen)


@register_text_embedder("table")
class TokenEmbeddingTable(TextEmbedder):
    """Learnable per-token embedding lookup."""

    def __init__(self, cfg: TokenizerConfig, frozen: bool = False):
        super().__init__(frozen=frozen)
        cfg.validate()
        self.vocab_size = cfg.vocab_size
        self.table = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        if frozen:
            for p in self.parameters():
                p.requires_grad_(False)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        bad = (token_ids < 0) | (token_ids >= self.vocab_size)
        if bad.any():
            pos = int(bad.flatten().nonzero()[0])
            flat = token_ids.flatten()
            width = token_ids.shape[-1]
            raise OutOfVocabulary(int(flat[pos]), pos % width)
        return self.table(token_ids)


def text_to_tokens(text: TextSample, embedder: TextEmbedder) -> TokenSequence:
    """Embed one text sample; padding rows are kept but masked out."""
    ids = torch.tensor(text.token_ids, dtype=torch.long)
    tokens = embedder(ids.unsqueeze(0)).squeeze(0)
    return TokenSequence(
        tokens=tokens,
        kind=ModalityKind.T,
        valid_mask=ids != PAD_ID,
    )
