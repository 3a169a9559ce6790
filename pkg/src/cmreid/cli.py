"""Command-line surface: gen-corpus, train, embed, eval.

Every command reads inputs, writes its artifacts atomically, and exits 0 on
success. Failures exit nonzero after printing one machine-readable JSON line
to stderr. Commands never mutate their inputs, and rerunning one with the
same inputs and seed reproduces its outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import parse_run_config, resolve_seed, run_config_to_dict
from .datamodel import (
    ModalityKind,
    generate_corpus,
    load_corpus,
    save_corpus,
    split_by_view,
)
from .errors import CmreidError, ConfigParse, EmptyQuerySet, MissingInput
from .model import build_model
from .retrieval_eval import embed_records, evaluate_protocol, make_protocol, save_records
from .training import train


def _emit(payload: dict):
    print(json.dumps(payload, sort_keys=True))


def _load_config(args):
    path = args.config
    if not os.path.exists(path):
        raise MissingInput(f"config file {path} does not exist")
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigParse(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigParse("config root must be a JSON object")
    seed = resolve_seed(args.seed, os.environ.get("UMM_SEED"), raw.get("seed", 0))
    return parse_run_config(raw, seed_override=seed)


def _restore_model(checkpoint_dir: str):
    ckpt = load_checkpoint(checkpoint_dir)
    cfg = parse_run_config(ckpt.config)
    model = build_model(cfg.model_config(), seed=ckpt.seed)
    ckpt.load_into(model)
    model.eval()
    return model, cfg, ckpt


def _parse_kinds(text: str):
    kinds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            kinds.append(ModalityKind(part))
        except ValueError as exc:
            raise ConfigParse(f"unknown modality {part!r}; use R,S,I,T") from exc
    if not kinds:
        raise ConfigParse("no modalities given")
    return frozenset(kinds)


def _select_split(corpus, holdout_views: int, split: str):
    train_tuples, heldout = split_by_view(corpus, holdout_views)
    if split == "train":
        return train_tuples
    if split == "heldout":
        return heldout
    return corpus.tuples


def cmd_gen_corpus(args) -> int:
    cfg = _load_config(args)
    corpus = generate_corpus(cfg.corpus)
    save_corpus(corpus, args.out)
    _emit({
        "command": "gen-corpus",
        "out": args.out,
        "identities": cfg.corpus.num_identities,
        "tuples": len(corpus.tuples),
        "seed": cfg.corpus.seed,
    })
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    corpus = load_corpus(args.corpus)

    def show(rec):
        print(f"epoch {rec.epoch:3d} phase {rec.phase} "
              f"loss {rec.loss_total:.4f} nce {rec.loss_nce:.4f} "
              f"syn {rec.loss_syn:.4f} triplet {rec.triplet_satisfaction:.4f}")

    model, log = train(corpus, cfg.train, cfg.model_config(),
                       on_epoch=show if not args.quiet else None)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.jsonl")
    log.save_jsonl(log_path)
    ckpt_dir = os.path.join(args.out, "checkpoint")
    epochs = cfg.train.phase1_epochs + cfg.train.phase2_epochs
    save_checkpoint(ckpt_dir, model, run_config_to_dict(cfg), cfg.seed, epochs)
    _emit({
        "command": "train",
        "checkpoint": ckpt_dir,
        "train_log": log_path,
        "epochs": epochs,
        "final_loss": log.records[-1].loss_total if log.records else None,
        "final_triplet_satisfaction":
            log.records[-1].triplet_satisfaction if log.records else None,
        "seed": cfg.seed,
    })
    return 0


def cmd_embed(args) -> int:
    model, cfg, ckpt = _restore_model(args.checkpoint)
    corpus = load_corpus(args.corpus)
    kinds = _parse_kinds(args.modalities)
    tuples = _select_split(corpus, cfg.train.holdout_views, args.split)
    records = embed_records(model, tuples, kinds)
    if not records:
        raise EmptyQuerySet(f"no tuple in split {args.split!r} carries all of "
                            f"{sorted(k.value for k in kinds)}")
    save_records(args.out, records)
    _emit({
        "command": "embed",
        "out": args.out,
        "count": len(records),
        "modalities": sorted(k.value for k in kinds),
        "split": args.split,
    })
    return 0


def cmd_eval(args) -> int:
    model, cfg, ckpt = _restore_model(args.checkpoint)
    corpus = load_corpus(args.corpus)
    train_tuples, heldout = split_by_view(corpus, cfg.train.holdout_views)
    if not heldout:
        raise EmptyQuerySet("holdout split is empty; nothing to query with")
    synthesis = args.gallery_synthesis == "on"
    protocol = make_protocol(args.protocol, gallery_synthesis=synthesis,
                             self_exclusion=cfg.eval.self_exclusion)
    with torch.no_grad():
        report = evaluate_protocol(model, heldout, train_tuples, protocol)
    os.makedirs(args.out, exist_ok=True)
    stem = f"{args.protocol}_{'syn' if synthesis else 'plain'}"
    report_path = os.path.join(args.out, f"{stem}_report.json")
    cmc_path = os.path.join(args.out, f"{stem}_cmc.csv")
    report.save_json(report_path)
    report.save_cmc_csv(cmc_path)
    _emit({
        "command": "eval",
        "protocol": args.protocol,
        "gallery_synthesis": synthesis,
        "rank1": report.rank_k[1],
        "map": report.map_score,
        "queries": report.query_count,
        "excluded": report.excluded_count,
        "report": report_path,
        "cmc": cmc_path,
    })
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmreid",
        description="Cross-modal person re-identification at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-corpus", help="generate a procedural corpus")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.set_defaults(func=cmd_gen_corpus)

    tr = sub.add_parser("train", help="run the two-phase training schedule")
    tr.add_argument("--config", required=True)
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--quiet", action="store_true")
    tr.set_defaults(func=cmd_train)

    em = sub.add_parser("embed", help="write an embedding archive")
    em.add_argument("--checkpoint", required=True)
    em.add_argument("--corpus", required=True)
    em.add_argument("--modalities", required=True,
                    help="comma-separated subset of R,S,I,T")
    em.add_argument("--split", choices=("train", "heldout", "all"), default="all")
    em.add_argument("--out", required=True)
    em.set_defaults(func=cmd_embed)

    ev = sub.add_parser("eval", help="evaluate a retrieval protocol")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--protocol", required=True,
                    choices=("r2r", "i2r", "s2r", "t2r", "st2r"))
    ev.add_argument("--gallery-synthesis", choices=("on", "off"), default="off",
                    dest="gallery_synthesis")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CmreidError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
