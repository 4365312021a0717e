"""``fseb`` command line.

Subcommands::

    gen-context   summarise references, synthesise context images (bundle)
    embed         fill in a bundle's embeddings
    train         train one model per seed
    hpo           randomised grid search over (lambda, tau1, tau2)
    eval          test metrics and OOD AUROC for a trained run
    ood           OOD AUROC only, against named OOD sets
    ablate        VLM-VLM / VLM-Rand / Rand-VLM comparison
    report        aggregate metrics files into one json/csv table

Run outputs live under the configured ``out`` directory: ``config.json``,
``checkpoints/``, ``reports/``, ``figures/`` and (hpo) ``trials.csv``.
Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
configuration error.
"""

import argparse
import glob
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_datasets, ood_sets, reference_images
from .context import (
    GenerationPlan,
    ServiceEndpoint,
    embed_bundle,
    embed_dataset_images,
    generate_context,
    load_context_bundle,
    write_context_bundle,
)
from .errors import ConfigError, FsebError, UsageError
from .metrics import MetricsReport, OOD_METHODS, evaluate, ood_scores
from .nn import build_network, load_checkpoint
from .report import aggregate, emit_report, plot_ablation, plot_ood, plot_reliability, plot_training_curves
from .rng import stream
from .trainer import TrainBatchContext, random_search, train, trials_csv

log = logging.getLogger("fseb")

ABLATION_VARIANTS = ("VLM-VLM", "VLM-Rand", "Rand-VLM")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _diagnostic("UsageError", message, self.prog)
        sys.exit(2)


def _diagnostic(kind, message, command):
    print(json.dumps({"error": kind, "message": str(message), "command": command}), file=sys.stderr)


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _emit(rows):
    """Delimited summary on stdout."""
    print("metric\tdataset\tmethod\tmean\tstd")
    for r in rows:
        print(f"{r['metric']}\t{r['dataset']}\t{r['method']}\t{r['mean']:.6f}\t{r['std']:.6f}")


# ---------------------------------------------------------------------------
# config handling


def _load_config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    sets = list(getattr(args, "set", None) or [])
    if getattr(args, "out", None):
        sets.append(f"out={json.dumps(args.out)}")
    if getattr(args, "seeds", None):
        sets.append(f"seeds={json.dumps(args.seeds)}")
    if getattr(args, "bundle", None):
        sets.append(f"bundle={json.dumps(args.bundle)}")
    if getattr(args, "max_epochs", None):
        sets.append(f"train.max_epochs={args.max_epochs}")
    if getattr(args, "S_eval", None):
        sets.append(f"S_eval={args.S_eval}")
    return cfg.override(sets) if sets else cfg


def _run_config(run_dir):
    path = Path(run_dir) / "config.json"
    if not path.exists():
        raise ConfigError(f"{run_dir} is not a run directory (no config.json)")
    return RunConfig.load(path)


def _bundle_path(cfg):
    return cfg.bundle or os.path.join(cfg.out, "context")


def _context_for(cfg, train_ds):
    if cfg.context == "none":
        return None
    if cfg.context == "train_batch":
        return TrainBatchContext(train_ds.images, embed_dataset_images(cfg.endpoint("embedder"), train_ds.images))
    path = _bundle_path(cfg)
    if not (Path(path) / "manifest.json").exists():
        raise ConfigError(f"no context bundle at {path}; run gen-context and embed first")
    return load_context_bundle(path)


# ---------------------------------------------------------------------------
# gen-context / embed


def _generate(cfg, train_ds, seed):
    descriptors = list(cfg.generation.descriptors) or [f"class {c}" for c in range(train_ds.n_classes)]
    shape = train_ds.input_shape
    plan = GenerationPlan(
        cfg.generation.requirements, descriptors, cfg.generation.n_total,
        width=shape[2], height=shape[1], channels=shape[0],
        meta={"dataset": train_ds.name, "seed": seed},
    )
    refs = reference_images(train_ds, cfg.generation.n_references)
    return generate_context(cfg.endpoint("summarizer"), cfg.endpoint("generator"), refs, plan, stream(seed, "generate"))


def cmd_gen_context(args):
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    train_ds, _, _ = load_datasets(cfg, seed)
    bundle = _generate(cfg, train_ds, seed)
    if args.embed:
        bundle = embed_bundle(bundle, cfg.endpoint("embedder"), args.batch_size)
    path = write_context_bundle(bundle, _bundle_path(cfg))
    print(f"bundle\t{path}\tM_total={bundle.M_total}\td={bundle.d}")
    return 0


def cmd_embed(args):
    bundle = load_context_bundle(args.bundle)
    ep = ServiceEndpoint.from_dict(args.embedder) if args.embedder else _load_config(args).endpoint("embedder")
    bundle = embed_bundle(bundle, ep, args.batch_size)
    path = write_context_bundle(bundle, args.out_bundle or args.bundle)
    print(f"bundle\t{path}\tM_total={bundle.M_total}\td={bundle.d}")
    return 0


# ---------------------------------------------------------------------------
# train / hpo


def _train_seed(cfg, seed, out, context=None, tag=""):
    train_ds, _, _ = load_datasets(cfg, seed)
    if context is None:
        context = _context_for(cfg, train_ds)
    net = build_network(**cfg.net_spec(seed, train_ds.input_shape, train_ds.n_classes))
    ckpt = Path(out) / "checkpoints" / f"{tag}seed{seed}.fseb"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    rep = train(net, train_ds, context, cfg.kernel, cfg.train_config(seed), ckpt)
    rep.checkpoint = str(ckpt.relative_to(out))
    _write(Path(out) / "reports" / f"{tag}train_seed{seed}.json", rep.to_json())
    if cfg.figures:
        plot_training_curves(rep, str(Path(out) / "figures" / f"{tag}train_seed{seed}.png"))
    return net, rep


def cmd_train(args):
    cfg = _load_config(args)
    out = Path(cfg.out)
    _write(out / "config.json", cfg.to_json())
    for seed in cfg.seeds:
        _, rep = _train_seed(cfg, seed, out)
        print(f"train\tseed={seed}\tbest_epoch={rep.best_epoch}\tstopped_epoch={rep.stopped_epoch}"
              f"\tbest_val_nll={rep.best_val_nll:.6f}")
    return 0


def cmd_hpo(args):
    cfg = _load_config(args)
    if args.trials:
        cfg = cfg.override([f"search.trials={args.trials}"])
    out = Path(cfg.out)
    _write(out / "config.json", cfg.to_json())
    seed = cfg.seeds[0]
    train_ds, _, _ = load_datasets(cfg, seed)
    context = _context_for(cfg, train_ds)
    workers = args.workers or int(cfg.search.get("workers", 1))
    best, table = random_search(
        cfg.search_space(), cfg.train_config(seed), cfg.kernel, train_ds, context, seed,
        cfg.net_spec(seed, train_ds.input_shape, train_ds.n_classes), workers=workers,
    )
    _write(out / "trials.csv", trials_csv(table))
    tuned = cfg.override([
        f"train.weight_decay={best['weight_decay']!r}", f"kernel.tau1={best['tau1']!r}", f"kernel.tau2={best['tau2']!r}",
    ])
    _write(out / "reports" / "hpo.json", json.dumps({"best": best, "config": tuned.to_dict()}, indent=2, sort_keys=True) + "\n")
    print(f"hpo\ttrials={len(table)}\tbest_trial={best['trial']}\tweight_decay={best['weight_decay']!r}"
          f"\ttau1={best['tau1']!r}\ttau2={best['tau2']!r}\tval_nll={best['val_nll']:.6f}")
    return 0


# ---------------------------------------------------------------------------
# eval / ood


def _evaluate_run(run_dir, names, prefix, fmt=None):
    cfg = _run_config(run_dir)
    run_dir = Path(run_dir)
    fmt = fmt or cfg.report_format
    reports = []
    for seed in cfg.seeds:
        ckpt = run_dir / "checkpoints" / f"seed{seed}.fseb"
        if not ckpt.exists():
            raise ConfigError(f"missing checkpoint {ckpt}; run train first")
        net = load_checkpoint(ckpt, cfg.arch)
        _, test_ds, synth_ood = load_datasets(cfg, seed)
        sets = ood_sets(cfg, names, test_ds, synth_ood, seed)
        rep, pb, obs = evaluate(net, test_ds, cfg.S_eval, stream(seed, "evaluate"), seed=seed, ood_sets=sets)
        reports.append(rep)
        _write(run_dir / "reports" / f"{prefix}_seed{seed}.json", json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
        if cfg.figures:
            plot_reliability(pb, test_ds.labels, str(run_dir / "figures" / f"reliability_seed{seed}.png"))
            if obs:
                plot_ood(ood_scores(pb, "msp"), {k: ood_scores(v, "msp") for k, v in obs.items()},
                         str(run_dir / "figures" / f"ood_seed{seed}.png"))
    path = emit_report(reports, fmt, str(run_dir / "reports" / f"{prefix}_summary.{fmt}"))
    _emit(aggregate(reports))
    return path


def cmd_eval(args):
    cfg = _run_config(args.run)
    _evaluate_run(args.run, list(cfg.ood), "metrics", args.format)
    return 0


def cmd_ood(args):
    _evaluate_run(args.run, args.ood, "ood", args.format)
    return 0


# ---------------------------------------------------------------------------
# ablation


def cmd_ablate(args):
    cfg = _load_config(args)
    out = Path(cfg.out)
    _write(out / "config.json", cfg.to_json())
    variants = args.variants or list(ABLATION_VARIANTS)
    unknown = set(variants) - set(ABLATION_VARIANTS)
    if unknown:
        raise UsageError(f"unknown ablation variants {sorted(unknown)}")
    embedder = cfg.endpoint("embedder")
    rand_embedder = ServiceEndpoint.from_dict(cfg.random_embedder)
    bpath = Path(_bundle_path(cfg))
    if (bpath / "manifest.json").exists():
        generated = load_context_bundle(bpath)
    else:
        generated = _generate(cfg, load_datasets(cfg, cfg.seeds[0])[0], cfg.seeds[0])
        write_context_bundle(generated, bpath)
    vlm_bundle = embed_bundle(generated, embedder)
    rand_bundle = embed_bundle(generated, rand_embedder)

    reports = []
    per_seed = {}
    for seed in cfg.seeds:
        train_ds, test_ds, synth_ood = load_datasets(cfg, seed)
        sets = ood_sets(cfg, list(cfg.ood), test_ds, synth_ood, seed)
        for variant in variants:
            if variant == "VLM-VLM":
                ctx = vlm_bundle
            elif variant == "Rand-VLM":
                ctx = rand_bundle
            else:
                ctx = TrainBatchContext(train_ds.images, embed_dataset_images(embedder, train_ds.images))
            net, _ = _train_seed(cfg, seed, out, context=ctx, tag=f"{variant}_")
            rep, _, _ = evaluate(net, test_ds, cfg.S_eval, stream(seed, "evaluate"), seed=seed, ood_sets=sets, method=variant)
            reports.append(rep)
            per_seed.setdefault(seed, {})[variant] = rep.to_dict()
            _write(out / "reports" / f"ablate_{variant}_seed{seed}.json", json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    rows = aggregate(reports)
    emit_report(reports, cfg.report_format, str(out / "reports" / f"ablation.{cfg.report_format}"))
    _write(out / "reports" / "ablation_per_seed.json", json.dumps(per_seed, indent=2, sort_keys=True) + "\n")
    if cfg.figures:
        plot_ablation(rows, str(out / "figures" / "ablation.png"))
    _emit(rows)
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args):
    files = []
    for pattern in args.inputs:
        found = sorted(glob.glob(pattern))
        files += found if found else [pattern]
    reports = []
    for f in files:
        with open(f) as fh:
            reports.append(MetricsReport.from_dict(json.load(fh)))
    if not reports:
        raise UsageError("no metrics reports given")
    emit_report(reports, args.format, args.out)
    _emit(aggregate(reports))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="fseb", description="Function-space empirical Bayes with embedding-based priors.")
    p.add_argument("--version", action="version", version=f"fseb {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--seeds", type=int, nargs="+", help="seed list (overrides config)")
        sp.add_argument("--bundle", help="context bundle directory (overrides config)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. train.lr=1e-3")
        return sp

    sp = with_config(sub.add_parser("gen-context", help="generate a context bundle"))
    sp.add_argument("--embed", action="store_true", help="also embed the generated images")
    sp.add_argument("--batch-size", type=int, default=16)
    sp.set_defaults(func=cmd_gen_context)

    sp = sub.add_parser("embed", help="embed a context bundle in place")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--embedder", help="endpoint URL (default: config providers.embedder)")
    sp.add_argument("--config")
    sp.add_argument("--out-bundle", help="write to another directory instead")
    sp.add_argument("--batch-size", type=int, default=16)
    sp.set_defaults(func=cmd_embed)

    sp = with_config(sub.add_parser("train", help="train one model per seed"))
    sp.add_argument("--max-epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("hpo", help="randomised grid search"))
    sp.add_argument("--trials", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--max-epochs", type=int)
    sp.set_defaults(func=cmd_hpo)

    sp = sub.add_parser("eval", help="evaluate a trained run")
    sp.add_argument("--run", "--in", dest="run", required=True, help="run directory")
    sp.add_argument("--format", choices=("json", "csv"))
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ood", help="OOD detection for a trained run")
    sp.add_argument("--in", "--run", dest="run", required=True, help="run directory")
    sp.add_argument("--ood", action="append", required=True, help="noise, synth or idx:<images>:<labels>")
    sp.add_argument("--format", choices=("json", "csv"))
    sp.set_defaults(func=cmd_ood)

    sp = with_config(sub.add_parser("ablate", help="context/embedding ablation"))
    sp.add_argument("--variants", nargs="+", choices=ABLATION_VARIANTS)
    sp.add_argument("--max-epochs", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="aggregate metrics files")
    sp.add_argument("inputs", nargs="+", help="MetricsReport JSON files or globs")
    sp.add_argument("--format", choices=("json", "csv"), default="csv")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def run_cli(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        _diagnostic(type(exc).__name__, exc, args.command)
        return 2
    except (FsebError, OSError) as exc:
        _diagnostic(type(exc).__name__, exc, args.command)
        return 1


def main(argv=None):
    sys.exit(run_cli(argv))


if __name__ == "__main__":
    main()
