"""Multimodal sample model and procedural toy corpus.

Each identity observation is a tuple holding up to four modalities: an RGB
rendering of a parametric person silhouette, an infrared-style derivation
(luminance + blur + noise), a binary sketch (thresholded Sobel edges), and a
short attribute sentence over a fixed vocabulary. Ground-truth identity labels
are known by construction, so retrieval accuracy is measurable end to end.

Everything here is a pure function of the corpus seed: equal specs produce
bit-equal corpora, including raster bytes.
"""

from __future__ import annotations

import enum
import functools
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, MissingManifest, RasterLengthMismatch, VersionMismatch

CORPUS_FORMAT_VERSION = 1

# Fixed, versioned with the corpus so token ids are stable across runs.
PAD_TOKEN = "<pad>"
HUE_WORDS = ("red", "orange", "yellow", "green", "cyan", "blue", "purple", "magenta")
BUILDS = ("slim", "medium", "broad")
ACCESSORIES = ("none", "backpack", "hat")
PATTERNS = ("plain", "striped")
VOCAB: tuple[str, ...] = (
    PAD_TOKEN,
    "a", "person", "in", "clothing", "with",
    *BUILDS,
    *HUE_WORDS,
    *PATTERNS,
    "nothing", "backpack", "hat",
)
PAD_ID = 0
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}

TEXT_MAX_TOKENS = 16
SKETCH_THRESHOLD = 0.6

# Stream salts keep the independent RNG uses of one corpus seed from colliding.
_SALT_COMBO, _SALT_PRESENCE, _SALT_POSE, _SALT_PIXELS = 11, 17, 19, 23


@functools.total_ordering
class ModalityKind(enum.Enum):
    """The four input channel types, ordered to match the unified sequence layout."""

    R = "R"  # RGB
    S = "S"  # sketch
    I = "I"  # infrared
    T = "T"  # text

    @property
    def order(self) -> int:
        return KIND_ORDER.index(self)

    def __lt__(self, other):
        if not isinstance(other, ModalityKind):
            return NotImplemented
        return self.order < other.order


KIND_ORDER: tuple[ModalityKind, ...] = (
    ModalityKind.R,
    ModalityKind.S,
    ModalityKind.I,
    ModalityKind.T,
)
IMAGE_KINDS: tuple[ModalityKind, ...] = (ModalityKind.R, ModalityKind.S, ModalityKind.I)


@dataclass(frozen=True)
class IdentityParams:
    """Appearance parameters for one identity; a pure function of (seed, index)."""

    hue: float
    build: str
    accessory: str
    pattern: str
    texture_seed: int


@dataclass(eq=False)
class ImageSample:
    """H×W×C float raster with values in [0, 1]; C is 3 for RGB, 1 for IR/sketch."""

    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise InvalidSpec(f"image must be H×W×C with C in {{1,3}}, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise InvalidSpec("image values must lie in [0, 1]")

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other):
        return isinstance(other, ImageSample) and np.array_equal(self.pixels, other.pixels)


@dataclass(eq=False)
class TextSample:
    """Token ids right-padded with the pad id to ``TEXT_MAX_TOKENS``."""

    token_ids: tuple[int, ...]
    raw_text: str

    def __post_init__(self):
        ids = tuple(int(i) for i in self.token_ids)
        object.__setattr__(self, "token_ids", ids)
        if any(i < 0 or i >= len(VOCAB) for i in ids):
            raise InvalidSpec("token id outside vocabulary")
        body = [i for i in ids if i != PAD_ID]
        if tuple(body) != ids[: len(body)]:
            raise InvalidSpec("pad ids may only appear as a suffix")

    @property
    def length(self) -> int:
        return sum(1 for i in self.token_ids if i != PAD_ID)

    def __eq__(self, other):
        return (
            isinstance(other, TextSample)
            and self.token_ids == other.token_ids
            and self.raw_text == other.raw_text
        )


@dataclass(eq=False)
class MultiModalTuple:
    """One identity observation across up to four modalities."""

    identity_id: int
    view_index: int
    samples: dict[ModalityKind, object]
    sample_id: str = ""

    def __post_init__(self):
        if not self.samples:
            raise InvalidSpec("a tuple must contain at least one modality")
        if not self.sample_id:
            self.sample_id = f"id{self.identity_id:04d}_v{self.view_index:02d}"

    @property
    def presence(self) -> frozenset[ModalityKind]:
        return frozenset(self.samples.keys())

    def __eq__(self, other):
        return (
            isinstance(other, MultiModalTuple)
            and self.identity_id == other.identity_id
            and self.view_index == other.view_index
            and self.sample_id == other.sample_id
            and self.samples == other.samples
        )


def _default_availability() -> dict[ModalityKind, float]:
    return {k: 1.0 for k in KIND_ORDER}


@dataclass(eq=False)
class CorpusSpec:
    """Shape and randomness of a generated corpus. RGB availability defaults to 1.0."""

    num_identities: int
    views_per_identity: int = 4
    availability: dict[ModalityKind, float] = field(default_factory=_default_availability)
    seed: int = 0
    image_size: int = 32

    def __post_init__(self):
        full = _default_availability()
        full.update({ModalityKind(k) if not isinstance(k, ModalityKind) else k: float(v)
                     for k, v in self.availability.items()})
        self.availability = full

    def validate(self):
        if self.num_identities < 2:
            raise InvalidSpec(f"need at least 2 identities, got {self.num_identities}")
        if self.views_per_identity < 1:
            raise InvalidSpec("views_per_identity must be >= 1")
        if self.image_size < 8:
            raise InvalidSpec("image_size must be >= 8")
        for k, v in self.availability.items():
            if not 0.0 <= v <= 1.0:
                raise InvalidSpec(f"availability({k.value}) = {v} outside [0, 1]")

    def __eq__(self, other):
        return (
            isinstance(other, CorpusSpec)
            and self.num_identities == other.num_identities
            and self.views_per_identity == other.views_per_identity
            and self.availability == other.availability
            and self.seed == other.seed
            and self.image_size == other.image_size
        )


@dataclass(eq=False)
class Corpus:
    spec: CorpusSpec
    identities: list[IdentityParams]
    tuples: list[MultiModalTuple]
    vocab: tuple[str, ...] = VOCAB

    def __eq__(self, other):
        return (
            isinstance(other, Corpus)
            and self.spec == other.spec
            and self.identities == other.identities
            and self.tuples == other.tuples
            and self.vocab == other.vocab
        )


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


# ---------------------------------------------------------------------------
# identity parameters
# ---------------------------------------------------------------------------

def _all_combos() -> list[tuple[int, str, str, str]]:
    return [
        (h, b, a, p)
        for h in range(len(HUE_WORDS))
        for b in BUILDS
        for a in ACCESSORIES
        for p in PATTERNS
    ]


def identity_params(seed: int, index: int) -> IdentityParams:
    """Deterministic appearance for identity ``index`` under corpus ``seed``.

    Attribute combinations are assigned without replacement (via a seeded
    permutation of all 144 combos) so any two of the first 144 identities
    differ in at least one describable attribute; the texture seed equals the
    index, so no two identities ever share all five fields.
    """
    combos = _all_combos()
    perm = _rng(seed, _SALT_COMBO).permutation(len(combos))
    hue_bin, build, accessory, pattern = combos[int(perm[index % len(combos)])]
    # bin center, not a jittered draw: the color word must pin the body color
    # exactly or text queries stall at the bin centroid among bin-mates.
    hue = (hue_bin + 0.5) / len(HUE_WORDS)
    return IdentityParams(
        hue=float(hue), build=build, accessory=accessory, pattern=pattern, texture_seed=index
    )


def hue_word(hue: float) -> str:
    return HUE_WORDS[int(hue * len(HUE_WORDS)) % len(HUE_WORDS)]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

# Region geometry is chosen so the five drawn parts never overlap under the
# pose jitter below, and every part keeps (near-)constant pixel area across
# identities except where the area itself is the attribute being drawn.  With
# disjoint constant-area regions the global color mean decomposes additively,
# one term per attribute, which is what makes all four derived views of one
# identity carry consistent evidence instead of entangled products.
_BUILD_HALF_WIDTH = {"slim": 0.12, "medium": 0.15, "broad": 0.19}
_TORSO_AREA = 0.018           # hw * hh, fixed: build changes aspect, not mass
_BUILD_HEAD_RADIUS = {"slim": 0.050, "medium": 0.080, "broad": 0.110}
_BG_LEVEL = 0.08
_BG_NOISE = 0.04
_HEAD_COLOR = (0.85, 0.72, 0.60)
_BACKPACK_COLOR = (0.50, 0.28, 0.05)
_HAT_COLOR = (0.95, 0.95, 0.22)
_LEG_PLAIN = (0.85, 0.85, 0.85)
_LEG_LIGHT = (0.95, 0.95, 0.95)
_LEG_DARK = (0.15, 0.15, 0.15)

# One body color per hue word.  Saturation/value are bent per bin so the
# luminances ascend 0.28..0.84 in equal steps: the blurred-luminance view
# then separates color bins just as the chroma planes do.
_PALETTE = (
    (0.5904, 0.1476, 0.1476),  # red
    (0.4475, 0.3636, 0.1119),  # orange
    (0.3427, 0.5484, 0.1371),  # yellow
    (0.1827, 0.7307, 0.3197),  # green
    (0.1934, 0.7734, 0.7734),  # cyan
    (0.5671, 0.6753, 1.0000),  # blue
    (0.8371, 0.6741, 1.0000),  # purple
    (1.0000, 0.7400, 0.9350),  # magenta
)


def _view_pose(params: IdentityParams, view: int, seed: int) -> tuple[float, float, float]:
    """Small affine jitter per view: rotation in degrees, translation in pixels."""
    rng = _rng(seed, _SALT_POSE, params.texture_seed, view)
    angle = rng.uniform(-10.0, 10.0)
    dx = rng.uniform(-3.0, 3.0)
    dy = rng.uniform(-3.0, 3.0)
    return angle, dx, dy


_SUPERSAMPLE = 4


def render_rgb(params: IdentityParams, view: int, seed: int, size: int = 32) -> ImageSample:
    """Colored body silhouette with accessory glyph, view jitter, background noise.

    Masks are tested analytically at 4x4 subpixel centers and composited by
    coverage. Without this, region areas quantize to whole pixels and the
    pose jitter aliases into per-view color noise on the same scale as the
    attribute fingerprints themselves.
    """
    angle, dx, dy = _view_pose(params, view, seed)
    rng = _rng(seed, _SALT_PIXELS, params.texture_seed, view, ModalityKind.R.order)

    n = size * _SUPERSAMPLE
    ys, xs = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    cx = (xs + 0.5) / n - 0.5 - dx / size
    cy = (ys + 0.5) / n - 0.5 - dy / size
    theta = math.radians(angle)
    ux = math.cos(theta) * cx + math.sin(theta) * cy + 0.5
    uy = -math.sin(theta) * cx + math.cos(theta) * cy + 0.5

    half_w = _BUILD_HALF_WIDTH[params.build]
    half_h = _TORSO_AREA / half_w
    head_r = _BUILD_HEAD_RADIUS[params.build]
    head = (ux - 0.5) ** 2 + (uy - 0.265) ** 2 <= head_r**2
    torso = ((ux - 0.5) / half_w) ** 2 + ((uy - 0.52) / half_h) ** 2 <= 1.0
    legs = (np.abs(ux - 0.5) <= 0.13) & (uy >= 0.69) & (uy <= 0.89)

    if params.accessory == "backpack":
        acc = (ux >= 0.14) & (ux <= 0.27) & (uy >= 0.40) & (uy <= 0.67)
        acc_color = _BACKPACK_COLOR
    elif params.accessory == "hat":
        acc = (np.abs(ux - 0.5) <= 0.14) & (uy >= 0.0975) & (uy <= 0.1525)
        acc_color = _HAT_COLOR
    else:
        acc = np.zeros((n, n), dtype=bool)
        acc_color = (0.0, 0.0, 0.0)

    body_color = _PALETTE[int(params.hue * len(HUE_WORDS)) % len(HUE_WORDS)]
    stripe = (np.floor(uy * 10.0).astype(int) % 2) == 1
    if params.pattern == "striped":
        leg_light, leg_dark = _LEG_LIGHT, _LEG_DARK
    else:
        leg_light = leg_dark = _LEG_PLAIN

    # Deepest region wins per subsample; index 0 is background.
    region = np.zeros((n, n), dtype=np.int8)
    region[legs & ~stripe] = 1
    region[legs & stripe] = 2
    region[torso] = 3
    region[head] = 4
    region[acc] = 5
    palette = np.array(
        [(0.0, 0.0, 0.0), leg_light, leg_dark, body_color, _HEAD_COLOR, acc_color]
    )

    ss = _SUPERSAMPLE
    onehot = (region[..., None] == np.arange(6)).astype(np.float64)
    cover = onehot.reshape(size, ss, size, ss, 6).mean(axis=(1, 3))

    img = cover[..., 1:] @ palette[1:]
    bg = _BG_LEVEL + rng.uniform(0.0, _BG_NOISE, size=(size, size, 3))
    img += cover[..., :1] * bg

    return ImageSample(pixels=np.clip(img, 0.0, 1.0).astype(np.float32))


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Perceptual luminance plane of an H×W×3 image."""
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def box_blur3(plane: np.ndarray) -> np.ndarray:
    """3×3 mean filter with edge-replicate borders."""
    padded = np.pad(plane, 1, mode="edge")
    out = np.zeros_like(plane, dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            out += padded[di : di + plane.shape[0], dj : dj + plane.shape[1]]
    return out / 9.0


def sobel_magnitude(plane: np.ndarray) -> np.ndarray:
    """Gradient magnitude under the 3×3 Sobel kernels, edge-replicate borders."""
    padded = np.pad(plane, 1, mode="edge")
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    ky = kx.T
    gx = np.zeros_like(plane, dtype=np.float64)
    gy = np.zeros_like(plane, dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            window = padded[di : di + plane.shape[0], dj : dj + plane.shape[1]]
            gx += kx[di, dj] * window
            gy += ky[di, dj] * window
    return np.sqrt(gx * gx + gy * gy)


def ir_from_rgb(rgb: np.ndarray, rng: np.random.Generator) -> ImageSample:
    """Infrared-style derivation: luminance, 3×3 box blur, additive noise."""
    plane = box_blur3(luminance(rgb.astype(np.float64)))
    plane = plane + rng.uniform(-0.03, 0.03, size=plane.shape)
    return ImageSample(pixels=np.clip(plane, 0.0, 1.0).astype(np.float32)[..., None])


def sketch_from_rgb(rgb: np.ndarray) -> ImageSample:
    """Binary sketch: Sobel gradient magnitude of luminance, thresholded to {0, 1}."""
    mag = sobel_magnitude(luminance(rgb.astype(np.float64)))
    return ImageSample(pixels=(mag > SKETCH_THRESHOLD).astype(np.float32)[..., None])


def tokenize_text(raw: str, l_max: int = TEXT_MAX_TOKENS) -> tuple[int, ...]:
    words = raw.split()
    if len(words) > l_max:
        raise InvalidSpec(f"text longer than {l_max} tokens")
    ids = [WORD_TO_ID[w] for w in words]
    return tuple(ids + [PAD_ID] * (l_max - len(ids)))


def render_text(params: IdentityParams) -> TextSample:
    acc_word = params.accessory if params.accessory != "none" else "nothing"
    raw = (
        f"a {params.build} person in {hue_word(params.hue)} "
        f"{params.pattern} clothing with {acc_word}"
    )
    return TextSample(token_ids=tokenize_text(raw), raw_text=raw)


def render_modality(
    params: IdentityParams, view: int, kind: ModalityKind, seed: int, size: int = 32
):
    """Render one modality sample; deterministic given (params, view, kind, seed)."""
    if kind == ModalityKind.R:
        return render_rgb(params, view, seed, size)
    if kind == ModalityKind.I:
        rgb = render_rgb(params, view, seed, size)
        rng = _rng(seed, _SALT_PIXELS, params.texture_seed, view, kind.order)
        return ir_from_rgb(rgb.pixels, rng)
    if kind == ModalityKind.S:
        rgb = render_rgb(params, view, seed, size)
        return sketch_from_rgb(rgb.pixels)
    if kind == ModalityKind.T:
        return render_text(params)
    raise InvalidSpec(f"unknown modality kind {kind!r}")


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Generate ``num_identities × views_per_identity`` tuples, fully seeded.

    A modality is present iff its per-(tuple, kind) uniform draw falls below
    the configured availability; RGB is forced present when the draws would
    otherwise leave the tuple empty.
    """
    spec.validate()
    identities = [identity_params(spec.seed, i) for i in range(spec.num_identities)]
    tuples = []
    for i, params in enumerate(identities):
        for v in range(spec.views_per_identity):
            draws = _rng(spec.seed, _SALT_PRESENCE, i, v).uniform(size=len(KIND_ORDER))
            present = [k for k, d in zip(KIND_ORDER, draws) if d < spec.availability[k]]
            if not present:
                present = [ModalityKind.R]
            samples = {
                k: render_modality(params, v, k, spec.seed, spec.image_size) for k in present
            }
            tuples.append(MultiModalTuple(identity_id=i, view_index=v, samples=samples))
    return Corpus(spec=spec, identities=identities, tuples=tuples)


def split_by_view(corpus: Corpus, holdout_views: int) -> tuple[list, list]:
    """Partition tuples into (train, heldout) by view index; last views held out."""
    cut = max(corpus.spec.views_per_identity - holdout_views, 0)
    train = [t for t in corpus.tuples if t.view_index < cut]
    held = [t for t in corpus.tuples if t.view_index >= cut]
    return train, held


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _spec_to_dict(spec: CorpusSpec) -> dict:
    return {
        "num_identities": spec.num_identities,
        "views_per_identity": spec.views_per_identity,
        "availability": {k.value: spec.availability[k] for k in KIND_ORDER},
        "seed": spec.seed,
        "image_size": spec.image_size,
    }


def _spec_from_dict(d: dict) -> CorpusSpec:
    return CorpusSpec(
        num_identities=int(d["num_identities"]),
        views_per_identity=int(d["views_per_identity"]),
        availability={ModalityKind(k): float(v) for k, v in d["availability"].items()},
        seed=int(d["seed"]),
        image_size=int(d["image_size"]),
    )


def _atomic_write_text(path: str, text: str):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp_")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_corpus(corpus: Corpus, path: str):
    """Write ``manifest.json`` plus one little-endian float32 raster per image sample."""
    os.makedirs(path, exist_ok=True)
    entries = []
    for t in corpus.tuples:
        rasters = {}
        text_entry = None
        for kind in KIND_ORDER:
            if kind not in t.samples:
                continue
            sample = t.samples[kind]
            if kind == ModalityKind.T:
                text_entry = {"raw": sample.raw_text, "token_ids": list(sample.token_ids)}
            else:
                fname = f"{t.sample_id}_{kind.value}.bin"
                with open(os.path.join(path, fname), "wb") as f:
                    f.write(sample.pixels.astype("<f4").tobytes())
                rasters[kind.value] = {"file": fname, "channels": sample.channels}
        entries.append(
            {
                "sample_id": t.sample_id,
                "identity_id": t.identity_id,
                "view_index": t.view_index,
                "modalities": [k.value for k in KIND_ORDER if k in t.samples],
                "text": text_entry,
                "rasters": rasters,
                "height": corpus.spec.image_size,
                "width": corpus.spec.image_size,
            }
        )
    manifest = {
        "version": CORPUS_FORMAT_VERSION,
        "spec": _spec_to_dict(corpus.spec),
        "vocabulary": list(corpus.vocab),
        "samples": entries,
    }
    _atomic_write_text(
        os.path.join(path, "manifest.json"), json.dumps(manifest, indent=1, sort_keys=True)
    )


def load_corpus(path: str) -> Corpus:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise MissingManifest(f"no manifest.json under {path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("version") != CORPUS_FORMAT_VERSION:
        raise VersionMismatch(
            f"corpus format {manifest.get('version')} != {CORPUS_FORMAT_VERSION}"
        )
    spec = _spec_from_dict(manifest["spec"])
    identities = [identity_params(spec.seed, i) for i in range(spec.num_identities)]
    tuples = []
    for entry in manifest["samples"]:
        h, w = entry["height"], entry["width"]
        samples: dict[ModalityKind, object] = {}
        for kv in entry["modalities"]:
            kind = ModalityKind(kv)
            if kind == ModalityKind.T:
                text = entry["text"]
                samples[kind] = TextSample(
                    token_ids=tuple(text["token_ids"]), raw_text=text["raw"]
                )
            else:
                raster = entry["rasters"][kv]
                c = raster["channels"]
                raw = np.fromfile(os.path.join(path, raster["file"]), dtype="<f4")
                if raw.size != h * w * c:
                    raise RasterLengthMismatch(entry["sample_id"], kv, h * w * c, raw.size)
                samples[kind] = ImageSample(pixels=raw.reshape(h, w, c))
        tuples.append(
            MultiModalTuple(
                identity_id=entry["identity_id"],
                view_index=entry["view_index"],
                samples=samples,
                sample_id=entry["sample_id"],
            )
        )
    return Corpus(spec=spec, identities=identities, tuples=tuples, vocab=tuple(manifest["vocabulary"]))
