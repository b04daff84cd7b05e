"""Run configuration and the train / evaluate / sweep plumbing behind the CLI."""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import Dataset, SyntheticSpec, generate, read_dataset, split
from .experts import ExpertSpec, annotate_dataset
from .losses import PsiKind, check_lambda
from .metrics import EvalReport, evaluate
from .model import DcbmModel, Variant, predict_batch
from .numkit import MLPSpec
from .train import TrainConfig, pretrain_frozen_encoder, train_dcbm_independent, train_dcbm_joint

DEFAULT_LAMBDAS = (0.0, 0.05, 0.1, 0.15, 0.3, 0.5)
TOP_KEYS = {
    "data", "split", "experts", "variant", "variants", "psi", "lambda", "lambdas",
    "train", "seeds", "regime", "encoder", "output_dir",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    synthetic: SyntheticSpec | None = None
    data_path: str | None = None
    train_frac: float = 0.8
    val_frac: float = 0.0
    split_seed: int = 0
    concept_expert: ExpertSpec | None = None
    task_expert: ExpertSpec | None = None
    variants: list[Variant] = field(default_factory=lambda: [Variant.DCBM])
    psi: PsiKind = PsiKind.CE
    lambdas: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    train: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    regime: str = "independent"
    encoder: dict | None = None
    output_dir: str | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)

    def train_config(self, lam: float, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "psi": self.psi.value, "lam": lam, "seed": seed})


def config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _get(d: dict, key: str, kind, where: str):
    val = d[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
        raise ConfigError(f"config key '{where}{key}' must be of type {kind.__name__}")
    return val


def parse_config(raw: dict) -> RunConfig:
    """Validate a JSON run config; every error names the offending key."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key '{sorted(unknown)[0]}'")
    cfg = RunConfig(raw=raw)

    data = raw.get("data", {"synthetic": {}})
    if not isinstance(data, dict) or len(set(data) & {"synthetic", "path"}) != 1 or set(data) - {"synthetic", "path"}:
        raise ConfigError("config key 'data' must hold exactly one of 'synthetic' or 'path'")
    if "synthetic" in data:
        try:
            cfg.synthetic = SyntheticSpec.from_dict(data["synthetic"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key 'data.synthetic': {exc}") from None
    else:
        cfg.data_path = _get(data, "path", str, "data.")

    sp = raw.get("split", {})
    try:
        cfg.train_frac = float(sp.get("train", 0.8))
        cfg.val_frac = float(sp.get("val", 0.0))
        cfg.split_seed = int(sp.get("seed", 0))
    except (TypeError, ValueError, AttributeError):
        raise ConfigError("config key 'split' must map train/val/seed to numbers") from None
    if set(sp) - {"train", "val", "seed"}:
        raise ConfigError(f"unknown config key 'split.{sorted(set(sp) - {'train', 'val', 'seed'})[0]}'")

    experts = raw.get("experts")
    if experts is not None:
        if not isinstance(experts, dict) or set(experts) - {"concept", "task"}:
            raise ConfigError("config key 'experts' must hold 'concept' and/or 'task'")
        try:
            cfg.concept_expert = ExpertSpec.from_dict(experts.get("concept", {"kind": "oracle"}))
            cfg.task_expert = ExpertSpec.from_dict(experts.get("task", {"kind": "oracle"}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key 'experts': {exc}") from None
    elif cfg.synthetic is not None:
        cfg.concept_expert = cfg.task_expert = ExpertSpec()

    if "variant" in raw and "variants" in raw:
        raise ConfigError("config key 'variants' conflicts with 'variant'")
    names = raw.get("variants", [raw["variant"]] if "variant" in raw else ["dcbm"])
    if not isinstance(names, list) or not names:
        raise ConfigError("config key 'variants' must be a non-empty list")
    try:
        cfg.variants = [Variant.parse(v) for v in names]
    except ValueError as exc:
        raise ConfigError(f"config key 'variant': {exc}") from None
    try:
        cfg.psi = PsiKind.parse(raw.get("psi", "ce"))
    except ValueError as exc:
        raise ConfigError(f"config key 'psi': {exc}") from None

    if "lambda" in raw and "lambdas" in raw:
        raise ConfigError("config key 'lambdas' conflicts with 'lambda'")
    lams = raw.get("lambdas", [raw["lambda"]] if "lambda" in raw else list(DEFAULT_LAMBDAS))
    if not isinstance(lams, list) or not lams:
        raise ConfigError("config key 'lambdas' must be a non-empty list")
    try:
        cfg.lambdas = [check_lambda(v) for v in lams]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key 'lambda': {exc}") from None

    train = raw.get("train", {})
    if not isinstance(train, dict):
        raise ConfigError("config key 'train' must be an object")
    for key in ("psi", "lambda", "lam", "seed"):
        if key in train:
            raise ConfigError(f"config key 'train.{key}' is set at the top level, not under 'train'")
    try:
        TrainConfig.from_dict({**train, "psi": cfg.psi.value})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key 'train': {exc}") from None
    cfg.train = dict(train)

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("config key 'seeds' must be a non-empty list of integers")
    cfg.seeds = list(seeds)

    cfg.regime = raw.get("regime", "independent")
    if cfg.regime not in ("independent", "joint"):
        raise ConfigError("config key 'regime' must be 'independent' or 'joint'")
    if cfg.regime == "joint" and any(not v.has_concepts for v in cfg.variants):
        raise ConfigError("config key 'regime': joint training needs variants with concept heads")
    enc = raw.get("encoder")
    if enc is not None:
        if not isinstance(enc, dict) or "widths" not in enc:
            raise ConfigError("config key 'encoder' must hold 'widths'")
        cfg.encoder = dict(enc)
    cfg.output_dir = raw.get("output_dir")
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(raw)


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def build_splits(cfg: RunConfig) -> Splits:
    ds = generate(cfg.synthetic) if cfg.synthetic is not None else read_dataset(cfg.data_path)
    if cfg.concept_expert is not None:
        ds = annotate_dataset(ds, cfg.concept_expert, cfg.task_expert)
    try:
        tr, va, te = split(ds, cfg.train_frac, cfg.val_frac, cfg.split_seed)
    except ValueError as exc:
        raise ConfigError(f"config key 'split': {exc}") from None
    if cfg.encoder is not None:
        enc_cfg = TrainConfig.from_dict({**cfg.train, **cfg.encoder.get("train", {}), "seed": cfg.split_seed})
        spec = MLPSpec((tr.input_dim, *cfg.encoder["widths"]))
        encoder, tr = pretrain_frozen_encoder(tr, spec, enc_cfg)
        va = va.with_inputs(encoder.embed(va.x))
        te = te.with_inputs(encoder.embed(te.x))
    return Splits(tr, va, te)


def fit(cfg: RunConfig, splits: Splits, variant: Variant, lam: float, seed: int):
    tcfg = cfg.train_config(lam, seed)
    if cfg.regime == "joint":
        model, hist = train_dcbm_joint(splits.train, tcfg, variant)
    else:
        model, hist = train_dcbm_independent(variant, splits.train, tcfg, splits.val if len(splits.val) else None)
    model.meta.update({
        "config_hash": cfg.config_hash,
        "seed": seed,
        "split": {"train": cfg.train_frac, "val": cfg.val_frac, "seed": cfg.split_seed},
    })
    return model, hist


def evaluate_model(model: DcbmModel, ds: Dataset, lam: float) -> EvalReport:
    if (model.variant.defer_concepts or model.variant.defer_task) and not ds.annotated:
        raise ValueError("evaluation data lacks expert annotations (hc, hy)")
    pred = predict_batch(model, ds.x, ds.hc, ds.hy)
    return evaluate(pred, ds.c, ds.y, lam)


def run_cell(cfg: RunConfig, splits: Splits, variant: Variant, seed: int, lambdas: list[float]) -> list[dict]:
    """Train and evaluate one sweep cell. Variants that never defer train once."""
    rows = []
    shared = None
    for lam in lambdas:
        if shared is None or variant.defer_concepts or variant.defer_task:
            shared = fit(cfg, splits, variant, lam, seed)[0]
        report = evaluate_model(shared, splits.test, lam)
        rows.append({"variant": variant.value, "psi": cfg.psi.value, "lambda": lam, "seed": seed, "report": report.to_dict()})
    return rows


def _cell_job(args):
    cfg, splits, variant, seed, lambdas = args
    try:
        return run_cell(cfg, splits, variant, seed, lambdas), None
    except Exception as exc:  # recorded in errors.csv, the sweep continues
        return [], {"variant": variant.value, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("DCBM_THREADS")
    n = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n, n_jobs))


def run_sweep(cfg: RunConfig, splits: Splits | None = None) -> tuple[list[dict], list[dict]]:
    splits = splits or build_splits(cfg)
    jobs = [(cfg, splits, v, s, cfg.lambdas) for v in cfg.variants for s in cfg.seeds]
    workers = worker_count(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_cell_job, jobs))
    else:
        outcomes = [_cell_job(j) for j in jobs]
    results = [row for rows, _ in outcomes for row in rows]
    errors = [err for _, err in outcomes if err is not None]
    results.sort(key=lambda r: (r["lambda"], r["variant"], r["psi"], r["seed"]))
    errors.sort(key=lambda e: (e["variant"], e["seed"]))
    return results, errors
