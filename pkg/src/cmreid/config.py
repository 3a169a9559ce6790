"""Run configuration: one JSON document covering corpus, model, training,
and evaluation, parsed strictly (unknown keys are rejected, never ignored).

Seed precedence is flag > UMM_SEED environment variable > config file. The
resolved seed becomes the run seed and flows into the corpus and train
sections unless the file pins those seeds explicitly.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .cue_fusion import FusionConfig
from .datamodel import CorpusSpec
from .errors import ConfigParse, MissingInput, VersionMismatch
from .model import ModelConfig
from .retrieval_eval import EXCLUSION_RULES, PROTOCOL_QUERY_KINDS
from .token_mapper import TokenizerConfig
from .training import TrainConfig
from .unified_encoder import EncoderConfig

CONFIG_VERSION = 1


@dataclass
class ModelOptions:
    share_image_tokenizer: bool = True
    text_embedder: str = "table"
    text_frozen: bool = False


def _default_protocols():
    return ["r2r", "i2r", "s2r", "t2r", "st2r"]


@dataclass
class EvalSelection:
    protocols: list = field(default_factory=_default_protocols)
    gallery_synthesis: bool = False
    self_exclusion: str = "same_identity_same_view"

    def validate(self):
        for name in self.protocols:
            if name not in PROTOCOL_QUERY_KINDS:
                raise ConfigParse(f"eval: unknown protocol {name!r}")
        if self.self_exclusion not in EXCLUSION_RULES:
            raise ConfigParse(f"eval: unknown self-exclusion rule {self.self_exclusion!r}")


@dataclass
class RunConfig:
    config_version: int = CONFIG_VERSION
    seed: int = 0
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(num_identities=40))
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    model: ModelOptions = field(default_factory=ModelOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSelection = field(default_factory=EvalSelection)

    def validate(self):
        if self.config_version != CONFIG_VERSION:
            raise VersionMismatch(f"config_version {self.config_version}, "
                                  f"supported {CONFIG_VERSION}")
        self.corpus.validate()
        self.model_config().validate()
        self.train.validate()
        self.eval.validate()
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            tokenizer=self.tokenizer,
            encoder=self.encoder,
            fusion=self.fusion,
            image_size=self.corpus.image_size,
            share_image_tokenizer=self.model.share_image_tokenizer,
            text_embedder=self.model.text_embedder,
            text_frozen=self.model.text_frozen,
        )


_SECTIONS = {
    "corpus": CorpusSpec,
    "tokenizer": TokenizerConfig,
    "encoder": EncoderConfig,
    "fusion": FusionConfig,
    "model": ModelOptions,
    "train": TrainConfig,
    "eval": EvalSelection,
}


def _build_section(cls, data: dict, where: str, extra_defaults=None):
    if not isinstance(data, dict):
        raise ConfigParse(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigParse(f"{where}: unknown key(s) {unknown}")
    kwargs = dict(extra_defaults or {})
    kwargs.update(data)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigParse(f"{where}: {exc}") from exc


def resolve_seed(flag_seed, env_value, config_seed: int) -> int:
    """Documented precedence: flag > UMM_SEED > config."""
    if flag_seed is not None:
        return int(flag_seed)
    if env_value is not None and env_value != "":
        try:
            return int(env_value)
        except ValueError as exc:
            raise ConfigParse(f"UMM_SEED must be an integer, got {env_value!r}") from exc
    return int(config_seed)


def parse_run_config(data: dict, seed_override=None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigParse("config root must be a JSON object")
    known_top = set(_SECTIONS) | {"config_version", "seed"}
    unknown = sorted(set(data) - known_top)
    if unknown:
        raise ConfigParse(f"unknown top-level key(s) {unknown}")

    seed = resolve_seed(seed_override, None, data.get("seed", 0))
    corpus_data = dict(data.get("corpus", {}))
    corpus_defaults = {"num_identities": 40, "views_per_identity": 4, "seed": seed}
    train_data = dict(data.get("train", {}))
    train_defaults = {"seed": seed}

    cfg = RunConfig(
        config_version=int(data.get("config_version", CONFIG_VERSION)),
        seed=seed,
        corpus=_build_section(CorpusSpec, corpus_data, "corpus", corpus_defaults),
        tokenizer=_build_section(TokenizerConfig, data.get("tokenizer", {}), "tokenizer"),
        encoder=_build_section(EncoderConfig, data.get("encoder", {}), "encoder"),
        fusion=_build_section(FusionConfig, data.get("fusion", {}), "fusion"),
        model=_build_section(ModelOptions, data.get("model", {}), "model"),
        train=_build_section(TrainConfig, train_data, "train", train_defaults),
        eval=_build_section(EvalSelection, data.get("eval", {}), "eval"),
    )
    return cfg.validate()


def load_run_config(path: str, seed_override=None) -> RunConfig:
    if not os.path.exists(path):
        raise MissingInput(f"config file {path} does not exist")
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigParse(f"{path}: {exc}") from exc
    return parse_run_config(data, seed_override=seed_override)


def run_config_to_dict(cfg: RunConfig) -> dict:
    corpus = dataclasses.asdict(cfg.corpus)
    corpus["availability"] = {k.value: v for k, v in cfg.corpus.availability.items()}
    return {
        "config_version": cfg.config_version,
        "seed": cfg.seed,
        "corpus": corpus,
        "tokenizer": dataclasses.asdict(cfg.tokenizer),
        "encoder": dataclasses.asdict(cfg.encoder),
        "fusion": dataclasses.asdict(cfg.fusion),
        "model": dataclasses.asdict(cfg.model),
        "train": dataclasses.asdict(cfg.train),
        "eval": dataclasses.asdict(cfg.eval),
    }
