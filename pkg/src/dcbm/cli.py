"""Command-line harness: gen-data, train, sweep, eval, explain, verify.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 IO error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import suites
from .datagen import DatasetFormatError, SyntheticSpec, generate, read_dataset, split, write_dataset
from .experiment import (
    ConfigError,
    RunConfig,
    build_splits,
    config_hash,
    evaluate_model,
    fit,
    load_config,
    run_sweep,
)
from .experts import ExpertSpec, annotate_dataset
from .explain import explain_instance
from .losses import check_lambda
from .metrics import aggregate_table, fmt, sweep_table
from .model import ModelFormatError, dumps_model, load_model

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}", EXIT_IO) from None


def _read_json(path: str, what: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror or exc}", EXIT_IO) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} {path} is not valid JSON: {exc}", EXIT_USAGE) from None


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _load_config(path: str) -> RunConfig:
    _read_json(path, "config")  # surfaces IO errors with exit 3
    return load_config(path)


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = args.out or (cfg.output_dir if cfg else None)
    if not out:
        raise ConfigError("config key 'output_dir' is missing and --out was not given")
    return Path(out)


def _load_model(path: str):
    try:
        return load_model(path)
    except OSError as exc:
        raise CliError(f"cannot read model {path}: {exc.strerror or exc}", EXIT_IO) from None
    except ModelFormatError as exc:
        raise CliError(f"model {path}: {exc}", EXIT_USAGE) from None


# -- gen-data -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    raw = _read_json(args.spec, "spec")
    if not isinstance(raw, dict):
        raise ConfigError("spec must be a JSON object")
    raw = dict(raw)
    experts = raw.pop("experts", None)
    try:
        spec = SyntheticSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None
    ds = generate(spec)
    if experts is not None:
        if not isinstance(experts, dict) or set(experts) - {"concept", "task"}:
            raise ConfigError("spec key 'experts' must hold 'concept' and/or 'task'")
        try:
            ce = ExpertSpec.from_dict(experts.get("concept", {}))
            te = ExpertSpec.from_dict(experts.get("task", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"spec key 'experts': {exc}") from None
        ds = annotate_dataset(ds, ce, te)
        ds.meta["experts"] = {"concept": ce.to_dict(), "task": te.to_dict()}
    try:
        data_path, manifest_path = write_dataset(ds, args.out)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {args.out}: {exc.strerror or exc}", EXIT_IO) from None
    print(f"wrote {len(ds)} samples to {data_path} and {manifest_path}")
    return EXIT_OK


# -- train ----------------------------------------------------------------


def _single(cfg: RunConfig, raw_key: str, values: list, what: str):
    if len(values) != 1:
        raise ConfigError(f"config key '{raw_key}' must name a single {what} for train (use sweep for grids)")
    return values[0]


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    variant = _single(cfg, "variants", cfg.variants, "variant")
    has_lam = "lambda" in cfg.raw or "lambdas" in cfg.raw
    lam = _single(cfg, "lambdas", cfg.lambdas, "lambda") if has_lam else 0.0
    splits = build_splits(cfg)
    multi = len(cfg.seeds) > 1
    for seed in cfg.seeds:
        model, hist = fit(cfg, splits, variant, lam, seed)
        suffix = f"_seed{seed}" if multi else ""
        _write(out / f"model{suffix}.json", dumps_model(model))
        rows = []
        for head, entries in sorted(hist.items()):
            for e in entries:
                rows.append([head, e["epoch"], fmt(e["train_loss"]), fmt(e.get("val_loss")), cfg.config_hash, seed])
        header = ["head", "epoch", "train_loss", "val_loss", "config_hash", "seed"]
        _write(out / f"history{suffix}.csv", _csv(header, rows))
        print(f"trained {variant.value} (psi={cfg.psi.value}, lambda={fmt(lam)}, seed={seed}) -> {out / f'model{suffix}.json'}")
    return EXIT_OK


# -- sweep ----------------------------------------------------------------


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    results, errors = run_sweep(cfg)
    _write(out / "results.csv", sweep_table(results))
    _write(out / "aggregate.csv", aggregate_table(results))
    _write(out / "errors.csv", _csv(["variant", "seed", "error"], [[e["variant"], e["seed"], e["error"]] for e in errors]))
    run = {
        "config": cfg.raw,
        "config_hash": cfg.config_hash,
        "seeds": cfg.seeds,
        "n_results": len(results),
        "n_errors": len(errors),
    }
    _write(out / "run.json", _dump_json(run))
    print(f"sweep: {len(results)} result rows, {len(errors)} failed cells -> {out}")
    for e in errors:
        print(f"  cell {e['variant']} seed {e['seed']} failed: {e['error']}", file=sys.stderr)
    return EXIT_OK


# -- eval / explain -------------------------------------------------------


def _eval_data(args, model):
    """Dataset for eval/explain: a config rebuilds the recorded splits, a data
    directory is used whole unless --split asks for the recorded cut."""
    if args.config:
        cfg = _load_config(args.config)
        parts = build_splits(cfg)
        name = args.split or "test"
        return (parts.train if name == "train" else parts.val if name == "val" else parts.test), name
    if not args.data:
        raise CliError("either --data or --config is required", EXIT_USAGE)
    try:
        ds = read_dataset(args.data)
    except OSError as exc:
        raise CliError(f"cannot read dataset {args.data}: {exc.strerror or exc}", EXIT_IO) from None
    except DatasetFormatError as exc:
        raise CliError(f"dataset {args.data}: {exc}", EXIT_USAGE) from None
    name = args.split or "all"
    if name == "all":
        return ds, name
    sp = model.meta.get("split")
    if not sp:
        raise CliError("model metadata records no split; use --split all", EXIT_USAGE)
    try:
        parts = split(ds, sp["train"], sp["val"], sp["seed"])
    except ValueError as exc:
        raise CliError(f"cannot reproduce the recorded split: {exc}", EXIT_USAGE) from None
    return parts[("train", "val", "test").index(name)], name


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    if args.lam is not None:
        lam = check_lambda(args.lam)
    elif "lambda" in model.meta:
        lam = check_lambda(model.meta["lambda"])
    else:
        raise CliError("--lambda omitted and the model records no training lambda", EXIT_USAGE)
    ds, name = _eval_data(args, model)
    if len(ds) == 0:
        raise CliError(f"split '{name}' is empty", EXIT_USAGE)
    report = evaluate_model(model, ds, lam)
    doc = {
        "config_hash": model.meta.get("config_hash"),
        "seed": model.meta.get("seed"),
        "variant": model.variant.value,
        "psi": model.psi.value,
        "split": name,
        "report": report.to_dict(),
    }
    out = Path(args.out)
    _write(out / "eval.json", _dump_json(doc))
    print(" ".join(f"{k}={fmt(v)}" for k, v in report.to_dict().items()))
    return EXIT_OK


def cmd_explain(args) -> int:
    model = _load_model(args.model)
    if not model.variant.has_concepts:
        raise CliError(f"variant has no concept heads: {model.variant.value}", EXIT_USAGE)
    ds, _ = _eval_data(args, model)
    if not ds.annotated:
        raise CliError("explain needs expert annotations (hc, hy) in the dataset", EXIT_USAGE)
    if args.top_k < 1:
        raise CliError("--top-k must be >= 1", EXIT_USAGE)
    out = Path(args.out)
    rows = []
    for i in range(min(args.limit, len(ds))):
        rep = explain_instance(
            model, ds.x[i], ds.hc[i], int(ds.hy[i]), ground_truth=(ds.c[i], ds.y[i]), top_k=args.top_k, instance=i
        )
        doc = {"config_hash": model.meta.get("config_hash"), "seed": model.meta.get("seed"), **rep.to_dict()}
        name = f"instance_{i:05d}.json"
        _write(out / name, _dump_json(doc))
        (after_label, after_p), = rep.to_dict()["after_deferral"]["top_k"][:1]
        (own_label, own_p), = rep.to_dict()["without_deferral"]["top_k"][:1]
        rows.append([i, name, len(rep.deferred), int(rep.task_deferred), after_label, fmt(after_p), own_label, fmt(own_p)])
    header = ["instance", "report", "n_deferred_concepts", "task_deferred", "top_after", "p_after", "top_without", "p_without"]
    _write(out / "index.csv", _csv(header, rows))
    print(f"wrote {len(rows)} explanation reports to {out}")
    return EXIT_OK


# -- verify ---------------------------------------------------------------


def cmd_verify(args) -> int:
    names = args.suite or list(suites.SUITES)
    try:
        result = suites.run_suites(names)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    result = {"config_hash": config_hash({"suites": names}), "seed": 0, **result}
    for name, res in result["suites"].items():
        extra = ""
        if name == "consistency" and res["findings"]:
            extra = f" ({len(res['findings'])} non-required findings)"
        print(f"{name}: {res['status']}{extra}")
    if args.out:
        _write(Path(args.out) / "verify.json", _dump_json(result))
    print(f"verify: {result['status']}")
    return EXIT_OK if result["status"] == "pass" else EXIT_VERIFY


# -- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcbm", description="Concept bottleneck models with deferral")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="JSON synthetic spec (may hold an 'experts' key)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    for name, func, text in (("train", cmd_train, "train one model per seed"), ("sweep", cmd_sweep, "lambda sweep")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, help="JSON run config")
        s.add_argument("--out", help="output directory (overrides config output_dir)")
        s.set_defaults(func=func)

    for name, func in (("eval", cmd_eval), ("explain", cmd_explain)):
        s = sub.add_parser(name, help=f"{name} a trained model")
        s.add_argument("--model", required=True, help="model.json")
        s.add_argument("--data", help="dataset directory")
        s.add_argument("--config", help="run config whose splits to rebuild")
        s.add_argument("--split", choices=["train", "val", "test", "all"], help="which split to use")
        s.add_argument("--out", required=True, help="output directory")
        s.set_defaults(func=func)
        if name == "eval":
            s.add_argument("--lambda", dest="lam", type=float, help="defer cost (default: the training lambda)")
        else:
            s.add_argument("--top-k", type=int, default=5)
            s.add_argument("--limit", type=int, default=20, help="number of instances to explain")

    v = sub.add_parser("verify", help="run verification suites")
    v.add_argument("--suite", action="append", choices=list(suites.SUITES), help="suite to run (repeatable)")
    v.add_argument("--out", help="directory for verify.json")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
