"""Command-line surface. Exit codes: 0 success, 2 config error,
3 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataset as ds
from . import pipeline as pl
from .config import ConfigError, RestorerConfig
from .checkpoint import CheckpointFormatError, load_arrays, save_arrays, \
    state_dict_to_arrays, arrays_to_state_dict
from .labels import LABEL_NAMES
from .metrics import write_metrics_csv
from .readability import (
    ClassifierConfig,
    ReadabilityModel,
    evaluate_readability,
    train_readability,
)


def _corpus_from_args(args):
    if args.corpus:
        return ds.load_corpus(args.corpus)
    return ds.generate_synthetic_fundus(seed=args.seed, count=args.count, size=args.size)


def cmd_gen_data(args):
    samples = ds.generate_synthetic_fundus(seed=args.seed, count=args.count, size=args.size)
    manifest = ds.save_corpus(samples, args.out)
    print(f"wrote {len(samples)} samples; manifest: {manifest}")


def _classifier_config(args) -> ClassifierConfig:
    cfg = ClassifierConfig(seed=args.seed)
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
        known = set(ClassifierConfig.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown classifier config keys: {sorted(unknown)}")
        cfg = ClassifierConfig(**{**cfg.__dict__, **data})
    return cfg


def cmd_train_readability(args):
    samples = _corpus_from_args(args)
    cfg = _classifier_config(args)
    split = ds.split_dataset(samples, (0.64, 0.16, 0.20), args.seed)
    if cfg.class_weights is None:
        weights, _ = ds.compute_class_weights([samples[i].labels for i in split.train])
        cfg.class_weights = weights
    model, history = train_readability(cfg, split, samples)
    os.makedirs(args.out, exist_ok=True)
    save_arrays(state_dict_to_arrays(model.state_dict(), "readability/"),
                os.path.join(args.out, "readability.rrgn"))
    report = evaluate_readability(model, [samples[i] for i in split.test], out_dir=args.out)
    for name in LABEL_NAMES:
        r = report.per_label[name]
        auc = "n/a" if r.auc is None else f"{r.auc:.4f}"
        print(f"{name}: acc={r.accuracy:.4f} f1={r.f1:.4f} auc={auc}")


def _load_classifier(path: str, cfg: ClassifierConfig) -> ReadabilityModel:
    model = ReadabilityModel(cfg)
    model.load_state_dict(arrays_to_state_dict(load_arrays(path), "readability/"))
    model.eval()
    return model


def cmd_train_restorer(args):
    cfg = RestorerConfig.from_json(args.config) if args.config else RestorerConfig()
    cfg.seed = args.seed
    samples = _corpus_from_args(args)
    _, history = pl.train_restorer(cfg, samples, out_dir=args.out)
    print(f"trained {cfg.epochs} epochs; final noise MSE {history['noise_mse'][-1]:.6f}")


def cmd_restore(args):
    cfg = RestorerConfig.from_json(args.config) if args.config else RestorerConfig()
    bundle = pl.load_restorer(cfg, args.restorer)
    clf_cfg = ClassifierConfig(input_size=64, base="plain_cnn")
    classifier = _load_classifier(args.classifier, clf_cfg)
    samples = _corpus_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    n_verified = 0
    for s in samples:
        result = pl.restore(s.image, classifier, bundle, input_id=s.id, clean=s.clean)
        ds.save_png(result.restored, os.path.join(args.out, f"{s.id}.restored.png"))
        n_verified += result.verified
        if result.metrics:
            rows.append(result.metrics)
    if rows:
        write_metrics_csv(rows, os.path.join(args.out, "metrics.csv"))
    print(f"restored {len(samples)} images; verified: {n_verified}")


def cmd_evaluate(args):
    cfg = _classifier_config(args)
    classifier = _load_classifier(args.classifier, cfg)
    samples = _corpus_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    report = evaluate_readability(classifier, samples, out_dir=args.out)
    print(f"evaluated {report.n_samples} samples; report in {args.out}")


def _cmd_compare(args, runner, name):
    cfg = RestorerConfig.from_json(args.config) if args.config else RestorerConfig()
    cfg.seed = args.seed
    samples = _corpus_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, f"{name}.csv")
    rows = runner(cfg, samples, out_path)
    print(f"wrote {len(rows)} rows to {out_path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retinaregen")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True):
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out")
        if corpus:
            p.add_argument("--corpus", default=None, help="manifest.jsonl path")
            p.add_argument("--count", type=int, default=200)
            p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(p, corpus=False)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-readability")
    common(p)
    p.set_defaults(func=cmd_train_readability)

    p = sub.add_parser("train-restorer")
    common(p)
    p.set_defaults(func=cmd_train_restorer)

    p = sub.add_parser("restore")
    common(p)
    p.add_argument("--restorer", required=True, help="restorer .rrgn checkpoint")
    p.add_argument("--classifier", required=True, help="readability .rrgn checkpoint")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("evaluate")
    common(p)
    p.add_argument("--classifier", required=True)
    p.set_defaults(func=cmd_evaluate)

    for name, runner in (
        ("compare-backbones", pl.compare_backbones),
        ("compare-extractors", pl.compare_feature_extractors),
        ("compare-fusion", pl.compare_fusion),
    ):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(func=lambda a, r=runner, n=name.replace("-", "_"): _cmd_compare(a, r, n))

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (pl.PipelineError, pl.TrainingError, CheckpointFormatError,
            FloatingPointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
