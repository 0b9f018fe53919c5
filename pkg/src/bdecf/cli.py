"""Command-line entry point: ``bdecf <command> [--config FILE] [--section.key VALUE ...]``.

Commands: fetch, ingest, train, evaluate, sweep, ablate, uncertainty, predict.
Every command writes into one run directory: a resolved ``config.yaml``, its
outputs, and ``manifest.json`` listing them. The directory is ``--output``,
else ``output_dir`` from the config, else ``$BDECF_OUTPUT_ROOT/<command>-<hash>``
(root defaults to ``runs``).

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 training
divergence, 5 checkpoint does not match the dataset.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, kernels
from .config import ConfigError, RunConfig, load_config
from .data import DataError, leave_one_out_split, load_ratings, preprocess
from .ensemble import SuperModel, train_supermodel
from .evaluation import (SWEEP_METRICS, METRIC_NAMES, ablation_run, evaluate, model_scorer,
                         sparsity_sweep, write_csv)
from .model import WeakLearner, train_weak_learner
from .nn import NonFiniteError

log = logging.getLogger("bdecf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4, 5


class CheckpointMismatch(RuntimeError):
    """Checkpoint architecture or index space disagrees with the dataset."""


# ------------------------------------------------------------------ helpers


def _split_overrides(extra):
    """Turn ``["--a.b", "1", "--c=2"]`` into ``[("a.b", "1"), ("c", "2")]``."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} needs a value")
            val = extra[i + 1]
            i += 2
        out.append((key.replace("-", "_"), val))
    return out


def config_hash(cfg: RunConfig):
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command, cfg: RunConfig, output=None):
        self.command = command
        self.cfg = cfg
        if output is None and cfg.output_dir:
            output = cfg.output_dir
        if output is None:
            root = Path(os.environ.get("BDECF_OUTPUT_ROOT", "runs"))
            output = root / f"{command}-{config_hash(cfg)}"
        self.dir = Path(output)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = []
        cfg.dump(self.path("config.yaml"))

    def path(self, name):
        self.files.append(str(name))
        return self.dir / name

    def write_json(self, name, obj):
        self.path(name).write_text(json.dumps(obj, indent=1, sort_keys=True))

    def finish(self, **extra):
        manifest = {
            "command": self.command,
            "config_hash": config_hash(self.cfg),
            "seed": self.cfg.seed,
            "version": __version__,
            "kernels": kernels.BACKEND,
            "files": sorted(set(self.files)),
        }
        manifest.update(extra)
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return self.dir


def load_dataset(cfg: RunConfig):
    d = cfg.dataset
    if not d.path:
        raise ConfigError("dataset.path is required (set it in the config or pass --dataset.path)")
    if not Path(d.path).is_file():
        raise DataError(f"dataset.path: no such file {d.path}")
    ds = load_ratings(d.path, d.format, d.scale)
    if d.preprocess:
        ds = preprocess(ds, d.min_item_raters, d.min_user_ratings)
    return ds


def load_split(cfg):
    ds = load_dataset(cfg)
    return ds, leave_one_out_split(ds)


def train_model(dataset, cfg: RunConfig):
    """WeakLearner or SuperModel per ``ensemble.enabled``; returns ``(model, info)``."""
    if cfg.ensemble.enabled:
        return train_supermodel(dataset, cfg.ensemble_config())
    model, trace = train_weak_learner(dataset, cfg.learner_config())
    return model, {"learner_traces": [trace.to_dict()]}


def save_model(model, directory):
    directory = Path(directory)
    if isinstance(model, SuperModel):
        model.save(directory)
    else:
        directory.mkdir(parents=True, exist_ok=True)
        model.save(directory / "learner.ckpt")
        (directory / "manifest.json").write_text(json.dumps(
            {"kind": "weak_learner", "learners": ["learner.ckpt"], "meta": None}, indent=2))


def load_model(path):
    path = Path(path)
    if path.is_file():
        return WeakLearner.load(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointMismatch(f"{path}: no checkpoint manifest")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("kind") == "weak_learner":
        return WeakLearner.load(path / manifest["learners"][0])
    return SuperModel.load(path)


def check_compatible(model, dataset):
    learners = model.learners if isinstance(model, SuperModel) else [model]
    for m in learners:
        if (m.num_users, m.num_items) != (dataset.num_users, dataset.num_items):
            raise CheckpointMismatch(
                f"checkpoint covers {m.num_users} users x {m.num_items} items, "
                f"dataset has {dataset.num_users} x {dataset.num_items}")
        if tuple(m.scale) != tuple(dataset.scale):
            raise CheckpointMismatch(f"checkpoint scale {m.scale} != dataset scale {dataset.scale}")


def _metrics_row(report, **extra):
    row = dict(extra)
    row.update({k: report.metrics[k] for k in METRIC_NAMES if k in report.metrics})
    return row


def _write_labels(path, dataset):
    labels = {
        "users": None if dataset.user_labels is None else [str(x) for x in dataset.user_labels],
        "items": None if dataset.item_labels is None else [str(x) for x in dataset.item_labels],
    }
    Path(path).write_text(json.dumps(labels))


def _resolve_id(value, labels, kind, n):
    if labels is not None:
        lookup = {lab: i for i, lab in enumerate(labels)}
        if str(value) in lookup:
            return lookup[str(value)]
        raise DataError(f"unknown {kind} {value!r}")
    idx = int(value)
    if not 0 <= idx < n:
        raise DataError(f"{kind} index {idx} out of range [0, {n})")
    return idx


# ------------------------------------------------------------------ commands


def cmd_fetch(args, cfg):
    from .datasets import movielens_100k

    path = movielens_100k(args.root)
    if path is None:
        raise DataError("could not locate or download MovieLens 100k")
    print(path)
    return EXIT_OK


def cmd_ingest(args, cfg):
    from .data import export_csv

    ds = load_dataset(cfg)
    split = leave_one_out_split(ds)
    run = Run("ingest", cfg, args.output)
    stats = ds.stats()
    stats.update({"test_users": len(split), "flagged_users": int(len(split.flagged_users)),
                  "fingerprint": ds.fingerprint()})
    run.write_json("stats.json", stats)
    export_csv(ds, run.path("ratings.csv"))
    print(json.dumps(stats, indent=1))
    run.finish()
    return EXIT_OK


def cmd_train(args, cfg):
    ds, split = load_split(cfg)
    run = Run("train", cfg, args.output)
    model, info = train_model(split.train, cfg)
    save_model(model, run.dir / "checkpoint")
    run.files.append("checkpoint")
    _write_labels(run.path("labels.json"), split.train)
    run.write_json("traces.json", info)
    out = run.finish(checkpoint="checkpoint", train_fingerprint=split.train.fingerprint())
    print(out / "checkpoint")
    return EXIT_OK


def _checkpoint_arg(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CheckpointMismatch(f"checkpoint {ckpt} does not exist")
    return ckpt


def cmd_evaluate(args, cfg):
    ds, split = load_split(cfg)
    model = load_model(_checkpoint_arg(args))
    check_compatible(model, split.train)
    run = Run("evaluate", cfg, args.output)
    report = evaluate(
        model_scorer(model, cfg.bayes.predict_samples, cfg.negatives_seed, args.mode), split,
        cutoffs=tuple(cfg.eval.cutoffs), negatives_seed=cfg.negatives_seed,
        num_negatives=cfg.eval.num_negatives, tie_break=cfg.eval.tie_break,
        config={"checkpoint": str(args.checkpoint), "config_hash": config_hash(cfg)},
    )
    report.write_json(run.path("metrics.json"))
    write_csv([_metrics_row(report, checkpoint=str(args.checkpoint))], run.path("metrics.csv"))
    write_csv([{"user": int(u), "item": int(i), "rank": int(r)}
               for u, i, r in zip(report.users, report.items, report.ranks)],
              run.path("per_user.csv"))
    print(json.dumps(report.metrics, indent=1))
    run.finish()
    return EXIT_OK


def cmd_sweep(args, cfg):
    ds, split = load_split(cfg)
    run = Run("sweep", cfg, args.output)
    rows = sparsity_sweep(split, lambda part: train_model(part, cfg)[0],
                          fractions=tuple(cfg.eval.sweep_fractions), seed=cfg.seed,
                          negatives_seed=cfg.negatives_seed, num_negatives=cfg.eval.num_negatives,
                          samples=cfg.bayes.predict_samples)
    write_csv([r for r, _ in rows], run.path("sweep.csv"),
              ["fraction", "train_size", *SWEEP_METRICS])
    for row, _ in rows:
        print(json.dumps(row))
    run.finish()
    return EXIT_OK


def cmd_ablate(args, cfg):
    ds, split = load_split(cfg)
    run = Run("ablate", cfg, args.output)
    variants = args.variants or cfg.eval.variants
    cache, rows = {}, []
    for v in variants:
        report = ablation_run(v, split, cfg.ensemble_config(), cfg.negatives_seed,
                              cfg.eval.num_negatives, cfg.bayes.predict_samples, cache)
        report.write_json(run.path(f"ablation_{v}.json"))
        rows.append(_metrics_row(report, variant=v))
        print(json.dumps(rows[-1]))
    write_csv(rows, run.path("ablation.csv"))
    run.finish()
    return EXIT_OK


def cmd_uncertainty(args, cfg):
    from .uncertainty import UncertaintyScoreParams, prune_model, user_uncertainty_profile

    ds, split = load_split(cfg)
    model = load_model(_checkpoint_arg(args))
    check_compatible(model, split.train)
    run = Run("uncertainty", cfg, args.output)
    u = cfg.uncertainty
    params = UncertaintyScoreParams(u.alpha, u.beta)
    methods = ("reparam", "ensemble") if args.method == "both" else (args.method,)
    summary = {}
    for method in methods:
        rep = user_uncertainty_profile(model, split, method, params, u.sparse_threshold,
                                       u.inconsistency_std, u.num_negatives, cfg.negatives_seed)
        rep.write_pairs_csv(run.path(f"uncertainty_{method}_pairs.csv"))
        rep.write_curve_csv(run.path(f"uncertainty_{method}_curve.csv"))
        summary[method] = rep.summary()
    if args.prune:
        pruned, _ = prune_model(model, u.prune_fraction)
        kw = dict(negatives_seed=cfg.negatives_seed, num_negatives=cfg.eval.num_negatives)
        before = evaluate(model_scorer(model), split, **kw).metrics
        after = evaluate(model_scorer(pruned), split, **kw).metrics
        summary["pruning"] = {"fraction": u.prune_fraction, "before": before, "after": after}
    run.write_json("uncertainty_summary.json", summary)
    print(json.dumps(summary, indent=1))
    run.finish()
    return EXIT_OK


def cmd_predict(args, cfg):
    from .uncertainty import ensemble_uncertainty, item_scores, user_scores

    ckpt = _checkpoint_arg(args)
    model = load_model(ckpt)
    labels_path = (ckpt if ckpt.is_dir() else ckpt.parent).parent / "labels.json"
    labels = json.loads(labels_path.read_text()) if labels_path.is_file() and not args.internal_ids else {}
    first = model.learners[0] if isinstance(model, SuperModel) else model
    u = _resolve_id(args.user, labels.get("users"), "user", first.num_users)
    i = _resolve_id(args.item, labels.get("items"), "item", first.num_items)
    samples = cfg.bayes.predict_samples
    out = {"user": args.user, "item": args.item}
    if isinstance(model, SuperModel):
        r, members = model.predict([u], [i], args.mode, samples, cfg.seed, return_members=True)
        out["rating"] = float(r[0])
        out["members"] = [float(x) for x in members[0]]
    else:
        out["rating"] = float(model.predict([u], [i], samples, cfg.seed)[0])
    if args.samples > 0:
        # Monte Carlo predictive mean over sampled last-layer weights
        pred = (model.predict([u], [i], args.mode, args.samples, cfg.seed)
                if isinstance(model, SuperModel) else model.predict([u], [i], args.samples, cfg.seed))
        out["rating_mc"] = float(pred[0])
    if args.with_uncertainty:
        out["reparam_user"] = float(user_scores(model, [u])[0])
        out["reparam_item"] = float(item_scores(model, [i])[0])
        out["ensemble_std"] = (float(ensemble_uncertainty(members[0]))
                               if isinstance(model, SuperModel) and model.K > 1 else None)
    print(json.dumps(out))
    return EXIT_OK


COMMANDS = {
    "fetch": cmd_fetch,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "uncertainty": cmd_uncertainty,
    "predict": cmd_predict,
}


def build_parser():
    p = argparse.ArgumentParser(
        prog="bdecf", description="Bayesian deep ensemble collaborative filtering.",
        epilog="Any config field can be overridden with --section.key VALUE, "
               "e.g. --ensemble.K 3 --training.epochs 5.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, checkpoint=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        sp.add_argument("--output", help="run directory")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="checkpoint directory or file")
        return sp

    sp = add("fetch", "download MovieLens 100k")
    sp.add_argument("--root", help="data directory (default ./data or $BDECF_DATA)")
    add("ingest", "load and preprocess a rating file, write stats")
    add("train", "train a weak learner or SuperModel")
    sp = add("evaluate", "leave-one-out ranking evaluation", checkpoint=True)
    sp.add_argument("--mode", choices=("mlp", "average"), help="ensemble combine mode")
    add("sweep", "retrain on train subsets of increasing size")
    sp = add("ablate", "train and evaluate ablation variants")
    sp.add_argument("--variants", nargs="+", help="subset of variants to run")
    sp = add("uncertainty", "per-user uncertainty profile", checkpoint=True)
    sp.add_argument("--method", choices=("reparam", "ensemble", "both"), default="both")
    sp.add_argument("--prune", action="store_true", help="also report SNR-pruned metrics")
    sp = add("predict", "predict one rating", checkpoint=True)
    sp.add_argument("--user", required=True)
    sp.add_argument("--item", required=True)
    sp.add_argument("--with-uncertainty", action="store_true")
    sp.add_argument("--internal-ids", action="store_true", help="treat ids as 0-based indices")
    sp.add_argument("--mode", choices=("mlp", "average"))
    sp.add_argument("--samples", type=int, default=8,
                    help="posterior draws for rating_mc (0 to skip)")
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _split_overrides(extra)
        if args.seed is not None:
            overrides.append(("seed", str(args.seed)))
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
