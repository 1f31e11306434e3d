"""Command line interface: ``dbrm fit | predict | inspect | experiment``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments, inference
from .data_io import ConfigError, DataError, RunConfig, load_config, load_csv
from .features import leaf_indices, parse_key
from .gmjmcmc import ConfigurationError
from .scoring import ModelRegistry, key_string
from .transforms import TransformationSet

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("dbrm")

# artifact file names
CONFIG_FILE = "config.txt"
REGISTRY_FILE = "registry.jsonl"
FEATURES_FILE = "features.tsv"
MODELS_FILE = "models.tsv"
TRACE_FILE = "trace.jsonl"
FITS_FILE = "fits.jsonl"
RUN_FILE = "run.json"


class UsageError(Exception):
    pass


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    updates = {}
    for flag, field_name in (("seed", "seed"), ("threads", "threads"), ("algorithm", "algorithm"),
                             ("eta", "eta"), ("eta_star", "eta_star"), ("response", "response"),
                             ("family", "family")):
        v = getattr(args, flag, None)
        if v is not None:
            updates[field_name] = v
    return cfg.with_updates(**updates) if updates else cfg


def cmd_fit(args) -> int:
    cfg = _config_from_args(args)
    ds = load_csv(args.data, cfg.response)
    if cfg.family in ("bernoulli", "binomial", "logistic") and not ds.is_binary:
        raise DataError(f"{args.data}: response {ds.response_name!r} is not binary")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fr = experiments.fit(ds.X, ds.y, cfg)
    write_artifact(out, cfg, ds, fr)
    print(f"{len(fr.registry)} models, {cfg.threads} chain(s), {fr.seconds:.1f}s -> {out}")
    return EXIT_OK


def write_artifact(out: Path, cfg: RunConfig, ds, fr: experiments.FitResult) -> None:
    (out / CONFIG_FILE).write_text(cfg.to_text())
    with open(out / REGISTRY_FILE, "w") as fh:
        fr.registry.dump(fh)
    with open(out / FEATURES_FILE, "w") as fh:
        inference.write_feature_report(fr.merged, fh, ds.column_names)
    with open(out / MODELS_FILE, "w") as fh:
        inference.write_model_report(fr.merged, fr.registry, fh)
    with open(out / TRACE_FILE, "w") as fh:
        for b, chain in enumerate(fr.chains):
            for rec in chain.trace:
                fh.write(json.dumps({"chain": b, **rec.as_dict()}) + "\n")
    transforms = TransformationSet.from_names(cfg.transform_names())
    fits = inference.fit_models(fr.merged, ds.X, ds.y, cfg.family, transforms)
    with open(out / FITS_FILE, "w") as fh:
        for f in fits:
            fh.write(json.dumps({"key": list(f.key), "posterior": f.posterior,
                                 "coefficients": [float(c) for c in f.coefficients]}) + "\n")
    run = {
        "columns": ds.column_names,
        "response": ds.response_name,
        "n": ds.n,
        "family": cfg.family,
        "transforms": list(cfg.transform_names()),
        "chains": len(fr.chains),
        "models": len(fr.registry),
        "glm_calls": fr.glm_calls,
        "seconds": fr.seconds,
        "merge_weights": inference.merge_weights(fr.summaries).tolist(),
    }
    (out / RUN_FILE).write_text(json.dumps(run, indent=2) + "\n")


def _read_fits(path: Path) -> list[inference.ModelFit]:
    fits = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                fits.append(inference.ModelFit(tuple(rec["key"]), rec["posterior"], np.array(rec["coefficients"])))
    return fits


def cmd_predict(args) -> int:
    art = Path(args.artifact)
    try:
        run = json.loads((art / RUN_FILE).read_text())
        fits = _read_fits(art / FITS_FILE)
    except FileNotFoundError as err:
        raise DataError(f"{art}: not a fit artifact ({err.filename} missing)") from None
    features = {k: parse_key(k) for f in fits for k in f.key}
    needed = sorted(leaf_indices(list(features.values())))
    names = run["columns"]
    ds = load_csv(args.data, run["response"], covariates=[names[i] for i in needed], response_optional=True)
    # map the training column positions onto the new file
    X = np.zeros((ds.n, len(names)))
    for j, i in enumerate(needed):
        X[:, i] = ds.X[:, j]
    transforms = TransformationSet.from_names(run["transforms"])
    eta = 0.5 if args.eta is None else args.eta
    scores, labels = inference.model_average_predict(fits, features, X, run["family"], eta, transforms)
    out = sys.stdout if args.out in (None, "-") else open(args.out, "w", newline="")
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["id", "score", "label"])
        for i, s in enumerate(scores):
            w.writerow([i, repr(float(s)), "" if labels is None else int(labels[i])])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_inspect(args) -> int:
    art = Path(args.artifact)
    missing = [f for f in (CONFIG_FILE, REGISTRY_FILE, FEATURES_FILE, MODELS_FILE) if not (art / f).exists()]
    if missing:
        raise DataError(f"{art}: missing artifact file(s): {', '.join(missing)}")
    cfg = load_config(art / CONFIG_FILE)
    with open(art / REGISTRY_FILE) as fh:
        reg = ModelRegistry.load(fh)
    with open(art / FEATURES_FILE) as fh:
        feats = inference.read_feature_report(fh)
    with open(art / MODELS_FILE) as fh:
        models = inference.read_model_report(fh)
    print(f"algorithm={cfg.algorithm} family={cfg.family} threads={cfg.threads} seed={cfg.seed}")
    print(f"registry: {len(reg)} models, {len(reg.features)} features")
    top = args.top
    print(f"features with inclusion >= {args.min_prob}:")
    for r in feats:
        if r["inclusion"] >= args.min_prob:
            print(f"  {r['rank']:>3}  {r['inclusion']:.4f}  c={r['complexity']}  {r['feature']}")
    print(f"top {top} models:")
    for r in models[:top]:
        print(f"  {r['posterior']:.4f}  {r['log_mass']:.3f}  {key_string(r['features']) or '(intercept only)'}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    name = args.experiment
    if name not in experiments.EXPERIMENTS:
        raise UsageError(f"unknown experiment {name!r}; choose from {', '.join(experiments.EXPERIMENTS)}")
    overrides = {}
    for flag in ("seed", "threads", "algorithm", "eta", "eta_star"):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[flag] = v
    if args.config:
        base = experiments.protocols()[name].config
        overrides = {**_diff(base, load_config(args.config, base)), **overrides}
    res = experiments.run_experiment(
        name, args.replications, overrides or None, args.data,
        progress=lambda r: log.info("replication %d: %.1fs", r.replication, r.seconds))
    table = res.format_table()
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}_table.txt").write_text(table + "\n")
        with open(out / f"{name}_replications.jsonl", "w") as fh:
            for r in res.replications:
                fh.write(json.dumps({"replication": r.replication, "seconds": r.seconds, "acc": r.acc,
                                     "fpr": r.fpr, "fnr": r.fnr, "detected": r.detected}) + "\n")
    return EXIT_OK


def _diff(base: RunConfig, cfg: RunConfig) -> dict:
    return {k: v for k, v in vars(cfg).items() if getattr(base, k) != v}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dbrm", description="Deep Bayesian regression models")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a delimited data file")
    f.add_argument("--config")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--response")
    f.add_argument("--family")
    _common(f)
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="model-averaged predictions from a fit artifact")
    pr.add_argument("artifact")
    pr.add_argument("--data", required=True)
    pr.add_argument("--out")
    pr.add_argument("--eta", type=float)
    pr.set_defaults(func=cmd_predict)

    i = sub.add_parser("inspect", help="summarize a fit artifact")
    i.add_argument("artifact")
    i.add_argument("--top", type=int, default=10)
    i.add_argument("--min-prob", type=float, default=0.1)
    i.set_defaults(func=cmd_inspect)

    e = sub.add_parser("experiment", help="replicate a benchmark protocol")
    e.add_argument("--experiment", required=True)
    e.add_argument("--replications", type=int, default=1)
    e.add_argument("--out")
    e.add_argument("--config")
    e.add_argument("--data")
    _common(e)
    e.set_defaults(func=cmd_experiment)
    return p


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--algorithm", choices=("gmjmcmc", "rgmjmcmc"))
    p.add_argument("--eta", type=float)
    p.add_argument("--eta-star", dest="eta_star", type=float)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, UsageError) as err:
        print(f"dbrm: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"dbrm: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except experiments.ChainFailure as err:
        print(f"dbrm: run aborted: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, ArithmeticError) as err:
        print(f"dbrm: runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
