"""Command-line surface: corpus generation, training, evaluation, and
single-query search.

Exit codes are stable API:
  0 success, 1 IO/runtime failure, 2 config validation error,
  3 training diverged (non-finite loss), 4 config hash mismatch,
  5 unknown query tokens.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import corpus as corpus_mod
from . import evaluation as eval_mod
from .model import ModelConfig, RetrievalModel, config_hash, load_checkpoint
from .objectives import TrainConfig, TrainingDiverged, train, write_loss_csv

EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_HASH_MISMATCH = 4
EXIT_UNKNOWN_TOKENS = 5


class ConfigError(ValueError):
    def __init__(self, fieldname, message):
        super().__init__(f"config field '{fieldname}': {message}")
        self.fieldname = fieldname


DEFAULT_CONFIG = {
    "corpus": {
        "n_identities": 60,
        "test_identities": 20,
        "images_per_caption": 1,
        "ratio": [2, 3],
        "seed": 0,
        "image_size": 32,
    },
    "model": {
        "dim": 64,
        "heads": 4,
        "image_blocks": 2,
        "text_blocks": 2,
        "cross_blocks": 2,
        "patch_size": 8,
        "proj_dim": 256,
        "tau": 0.07,
        "pose_enabled": True,
    },
    "train": {
        "batch_size": 22,
        "epochs": 30,
        "lr_start": 1e-4,
        "lr_end": 1e-5,
        "weight_decay": 0.01,
        "warmup": 500,
        "mask_rate": 0.25,
        "ihnm": True,
        "seed": 0,
    },
    "eval": {
        "setting": "behavior",
        "shortlist_k": 128,
    },
}

_FIELD_TYPES = {
    ("corpus", "n_identities"): int, ("corpus", "test_identities"): int,
    ("corpus", "images_per_caption"): int, ("corpus", "ratio"): list,
    ("corpus", "seed"): int, ("corpus", "image_size"): int,
    ("model", "dim"): int, ("model", "heads"): int,
    ("model", "image_blocks"): int, ("model", "text_blocks"): int,
    ("model", "cross_blocks"): int, ("model", "patch_size"): int,
    ("model", "proj_dim"): int, ("model", "tau"): float,
    ("model", "pose_enabled"): bool,
    ("train", "batch_size"): int, ("train", "epochs"): int,
    ("train", "lr_start"): float, ("train", "lr_end"): float,
    ("train", "weight_decay"): float, ("train", "warmup"): int,
    ("train", "mask_rate"): float, ("train", "ihnm"): bool,
    ("train", "seed"): int,
    ("eval", "setting"): str, ("eval", "shortlist_k"): int,
}


def load_config(path=None, overrides=None):
    """Merge TOML config and CLI overrides onto the defaults, validating
    field names and types."""
    config = {sec: dict(vals) for sec, vals in DEFAULT_CONFIG.items()}
    if path is not None:
        with open(path, "rb") as f:
            user = tomllib.load(f)
        for sec, vals in user.items():
            if sec not in config:
                raise ConfigError(sec, "unknown section")
            if not isinstance(vals, dict):
                raise ConfigError(sec, "expected a table")
            config[sec].update(vals)
    for sec, vals in (overrides or {}).items():
        config[sec].update(vals)
    for (sec, key), typ in _FIELD_TYPES.items():
        value = config[sec].get(key)
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            value = config[sec][key] = float(value)
        if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
            raise ConfigError(f"{sec}.{key}", f"expected {typ.__name__}, got {value!r}")
    for sec, vals in config.items():
        for key in vals:
            if (sec, key) not in _FIELD_TYPES:
                raise ConfigError(f"{sec}.{key}", "unknown field")
    if config["eval"]["setting"] not in ("behavior", "identity"):
        raise ConfigError("eval.setting", "must be 'behavior' or 'identity'")
    if len(config["corpus"]["ratio"]) != 2:
        raise ConfigError("corpus.ratio", "expected [normal, anomaly]")
    return config


def model_config_from(config):
    c, m = config["corpus"], config["model"]
    return ModelConfig(
        image_size=c["image_size"], patch_size=m["patch_size"],
        dim=m["dim"], heads=m["heads"], image_blocks=m["image_blocks"],
        text_blocks=m["text_blocks"], cross_blocks=m["cross_blocks"],
        proj_dim=m["proj_dim"], tau=m["tau"], pose_enabled=m["pose_enabled"],
        vocab_size=corpus_mod.VOCAB_SIZE,
    )


def _corpus_hash(config):
    return config_hash(config["corpus"])


# -- commands ----------------------------------------------------------------


def cmd_gen_corpus(args):
    config = load_config(args.config, _overrides(args))
    c = config["corpus"]
    train_records, _ = corpus_mod.generate_corpus(
        c["n_identities"], images_per_caption=c["images_per_caption"],
        ratio=tuple(c["ratio"]), seed=c["seed"], image_size=c["image_size"])
    test_records, _ = corpus_mod.generate_test_corpus(
        c["test_identities"], seed=c["seed"], image_size=c["image_size"])
    for i, r in enumerate(test_records):
        r.record_id = len(train_records) + i
    records = train_records + test_records
    index = corpus_mod.PairIndex.build(records)
    chash = _corpus_hash(config)
    corpus_mod.write_corpus(args.out, records, index,
                            meta={"config_hash": chash, "seed": c["seed"],
                                  "image_size": c["image_size"]})
    n_normal = sum(r.variant == "normal" for r in train_records)
    n_anomaly = sum(r.variant == "anomaly" for r in train_records)
    report = {
        "config_hash": chash,
        "n_train": len(train_records),
        "n_test": len(test_records),
        "normal_count": n_normal,
        "anomaly_count": n_anomaly,
        "ratio_achieved": [n_normal, n_anomaly],
    }
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(report, f, sort_keys=True, indent=1)
        f.write("\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_train(args):
    config = load_config(args.config, _overrides(args))
    records, index, header = corpus_mod.read_corpus(args.corpus)
    train_records = [r for r in records if r.split == "train"]
    model = RetrievalModel(model_config_from(config), seed=config["train"]["seed"])
    tc = config["train"]
    cfg = TrainConfig(batch_size=tc["batch_size"], epochs=tc["epochs"],
                      lr_start=tc["lr_start"], lr_end=tc["lr_end"],
                      weight_decay=tc["weight_decay"], warmup=tc["warmup"],
                      mask_rate=tc["mask_rate"], ihnm=tc["ihnm"], seed=tc["seed"])
    os.makedirs(args.out, exist_ok=True)
    ckpt_dir = os.path.join(args.out, "checkpoint")

    resume_state = None
    if args.resume and os.path.exists(os.path.join(ckpt_dir, "manifest.json")):
        resumed_model, extra, meta = load_checkpoint(ckpt_dir)
        model = resumed_model
        model.config = model_config_from(config)  # keep runtime toggles
        resume_state = {"arrays": extra, "meta": meta}

    extra_meta_base = {"corpus_hash": header.get("config_hash", ""),
                       "run_config_hash": config_hash(config)}
    if cfg.epochs == 0:
        from .model import save_checkpoint
        save_checkpoint(ckpt_dir, model,
                        extra_meta={**extra_meta_base, "epoch": -1, "step": 0,
                                    "history": []})
        history = []
    else:
        try:
            history = _train_with_meta(train_records, index, model, cfg, ckpt_dir,
                                       resume_state, extra_meta_base)
        except TrainingDiverged as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    write_loss_csv(os.path.join(args.out, "loss.csv"), history)
    with open(os.path.join(args.out, "config.json"), "w") as f:
        json.dump({"config": config, "config_hash": config_hash(config)}, f,
                  sort_keys=True, indent=1)
        f.write("\n")
    return 0


def _train_with_meta(records, index, model, cfg, ckpt_dir, resume_state, extra_meta):
    # train() owns checkpoint writing; re-save afterwards with the corpus
    # hash merged into the metadata so eval can verify compatibility.
    from .model import save_checkpoint
    from .objectives import AdamW

    history = train(records, index, model, cfg, checkpoint_dir=ckpt_dir,
                    resume_state=resume_state,
                    progress=lambda row: print(
                        f"epoch {row['epoch']}: total {row['l_total']:.4f} "
                        f"(cl {row['l_cl']:.4f} itm {row['l_itm']:.4f} "
                        f"mlm {row['l_mlm']:.4f}) lr {row['lr']:.2e}"))
    with open(os.path.join(ckpt_dir, "manifest.json")) as f:
        manifest = json.load(f)
    manifest["extra"].update(extra_meta)
    with open(os.path.join(ckpt_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return history


def cmd_eval(args):
    records, index, header = corpus_mod.read_corpus(args.corpus)
    model, extra, meta = load_checkpoint(args.checkpoint)
    if meta.get("corpus_hash") and meta["corpus_hash"] != header.get("config_hash"):
        print(f"error: checkpoint was trained on corpus {meta['corpus_hash']}, "
              f"got {header.get('config_hash')}", file=sys.stderr)
        return EXIT_HASH_MISMATCH
    setting = (eval_mod.BEHAVIOR_MATCH if args.setting == "behavior"
               else eval_mod.IDENTITY_MATCH)
    test_records = [r for r in records if r.split == "test"] or records
    report = eval_mod.evaluate(model, test_records, setting,
                               shortlist_k=args.shortlist_k,
                               checkpoint_hash=model.config.hash())
    out = json.dumps(report, sort_keys=True, indent=1)
    print(out)
    if args.out:
        with open(args.out, "w") as f:
            f.write(out + "\n")
    return 0


def cmd_search(args):
    records, index, header = corpus_mod.read_corpus(args.corpus)
    model, extra, meta = load_checkpoint(args.checkpoint)
    words = args.query.lower().split()
    unknown = [w for w in words if w not in corpus_mod.VOCAB.index]
    if unknown:
        print(f"error: unknown tokens: {' '.join(unknown)}", file=sys.stderr)
        return EXIT_UNKNOWN_TOKENS
    tokens = np.concatenate([[0], corpus_mod.VOCAB.encode(words)])
    gallery = [r for r in records if r.split == "test"] or records
    g_index = eval_mod.build_gallery_index(model, gallery)
    ranking = eval_mod.retrieve_two_stage(tokens, g_index, model,
                                          shortlist_k=max(args.top_k, 128))
    print("rank,record_id,sim,itm_prob")
    for rank in range(min(args.top_k, len(gallery))):
        prob = (f"{ranking.itm_probs[rank]:.6f}"
                if rank < ranking.shortlist_k else "")
        print(f"{rank + 1},{ranking.ordered_ids[rank]},"
              f"{ranking.similarities[rank]:.6f},{prob}")
    return 0


# -- argument parsing --------------------------------------------------------


def _overrides(args):
    overrides = {"corpus": {}, "model": {}, "train": {}, "eval": {}}
    if getattr(args, "seed", None) is not None:
        overrides["corpus"]["seed"] = args.seed
        overrides["train"]["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["train"]["epochs"] = args.epochs
    if getattr(args, "ihnm", None) is not None:
        overrides["train"]["ihnm"] = args.ihnm == "on"
    if getattr(args, "pose", None) is not None:
        overrides["model"]["pose_enabled"] = args.pose == "on"
    return overrides


def build_parser():
    parser = argparse.ArgumentParser(
        prog="anomsearch",
        description="Text-based person anomaly retrieval: corpus generation, "
                    "training, evaluation, and search.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    gen.add_argument("--config")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_corpus)

    tr = sub.add_parser("train", help="train a model on a generated corpus")
    tr.add_argument("--config")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--ihnm", choices=["on", "off"])
    tr.add_argument("--pose", choices=["on", "off"])
    tr.add_argument("--resume", action="store_true")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--setting", choices=["behavior", "identity"], default="behavior")
    ev.add_argument("--shortlist-k", type=int, default=128)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    se = sub.add_parser("search", help="rank gallery images for a text query")
    se.add_argument("--checkpoint", required=True)
    se.add_argument("--corpus", required=True)
    se.add_argument("--query", required=True)
    se.add_argument("--top-k", type=int, default=5)
    se.set_defaults(func=cmd_search)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
