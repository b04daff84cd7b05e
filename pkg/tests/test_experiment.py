import json

import pytest

from dcbm.datagen import SyntheticSpec, generate, write_dataset
from dcbm.experiment import (
    DEFAULT_LAMBDAS,
    ConfigError,
    build_splits,
    config_hash,
    load_config,
    parse_config,
    run_sweep,
    worker_count,
)

SMALL = {"data": {"synthetic": {"n_samples": 200, "seed": 3}}, "train": {"epochs": 3, "hidden": [8]}}


def small(**extra):
    return {**SMALL, **extra}


def test_defaults():
    cfg = parse_config({})
    assert cfg.lambdas == list(DEFAULT_LAMBDAS) and cfg.seeds == [0]
    assert [v.value for v in cfg.variants] == ["dcbm"] and cfg.psi.value == "ce"
    assert cfg.concept_expert is not None  # synthetic data defaults to oracle experts


@pytest.mark.parametrize(
    "raw, key",
    [
        ({"lamda": 0.1}, "lamda"),
        ({"psi": "hinge"}, "psi"),
        ({"variants": ["dcbm", "xyz"]}, "variant"),
        ({"lambdas": [0.1, 1.5]}, "lambda"),
        ({"lambda": 0.1, "lambdas": [0.2]}, "lambdas"),
        ({"seeds": [0, "a"]}, "seeds"),
        ({"train": {"lambda": 0.3}}, "train.lambda"),
        ({"train": {"epochz": 3}}, "train"),
        ({"data": {"synthetic": {}, "path": "x"}}, "data"),
        ({"data": {"synthetic": {"n_samples": -1}}}, "data.synthetic"),
        ({"split": {"train": 0.9, "val": 0.3}}, "split"),
        ({"split": {"tset": 0.1}}, "split.tset"),
        ({"regime": "joint", "variants": ["bb"]}, "regime"),
        ({"experts": {"concept": {"kind": "psychic"}}}, "experts"),
    ],
)
def test_errors_name_the_key(raw, key):
    with pytest.raises(ConfigError, match=f"'{key}'"):
        cfg = parse_config(raw)
        build_splits(cfg)  # split fractions are checked when splitting


def test_config_hash_is_canonical():
    a = config_hash({"b": 1, "a": [1, 2]})
    assert a == config_hash({"a": [1, 2], "b": 1}) and len(a) == 16
    assert a != config_hash({"a": [2, 1], "b": 1})


def test_load_config_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(p)
    with pytest.raises(OSError):
        load_config(tmp_path / "missing.json")


def test_grid_has_one_row_per_cell(monkeypatch):
    monkeypatch.setenv("DCBM_THREADS", "1")
    cfg = parse_config(small(lambdas=[0.0, 0.1, 0.3], seeds=[0, 1, 2]))
    results, errors = run_sweep(cfg)
    assert errors == [] and len(results) == 9
    keys = [(r["lambda"], r["variant"], r["psi"], r["seed"]) for r in results]
    assert keys == sorted(keys) and len(set(keys)) == 9


def test_non_deferring_variant_shares_model_across_lambdas(monkeypatch):
    monkeypatch.setenv("DCBM_THREADS", "1")
    results, _ = run_sweep(parse_config(small(variants=["cbm"], lambdas=[0.0, 0.3])))
    a, b = (r["report"] for r in results)
    assert a["acc_task"] == b["acc_task"] and a["cov_task"] == b["cov_task"] == 1.0


def test_failed_cell_is_recorded_and_sweep_continues(tmp_path, monkeypatch):
    monkeypatch.setenv("DCBM_THREADS", "1")
    write_dataset(generate(SyntheticSpec(n_samples=120, seed=0)), tmp_path / "d")
    # file data carries no expert annotations, so deferring variants cannot train
    cfg = parse_config({"data": {"path": str(tmp_path / "d")}, "variants": ["cbm", "dcbm"],
                        "lambdas": [0.1], "train": {"epochs": 2, "hidden": [4]}})
    results, errors = run_sweep(cfg)
    assert [r["variant"] for r in results] == ["cbm"]
    assert len(errors) == 1 and errors[0]["variant"] == "dcbm" and "annotations" in errors[0]["error"]


def test_worker_count(monkeypatch):
    monkeypatch.setenv("DCBM_THREADS", "3")
    assert worker_count(10) == 3 and worker_count(2) == 2
    monkeypatch.setenv("DCBM_THREADS", "1")
    assert worker_count(10) == 1


def test_parallel_matches_serial(monkeypatch):
    cfg = parse_config(small(variants=["dcbm", "cbm"], lambdas=[0.1], seeds=[0]))
    monkeypatch.setenv("DCBM_THREADS", "1")
    serial = run_sweep(cfg)
    monkeypatch.setenv("DCBM_THREADS", "2")
    parallel = run_sweep(cfg)
    assert json.dumps(serial) == json.dumps(parallel)


def test_joint_regime_and_encoder(monkeypatch):
    monkeypatch.setenv("DCBM_THREADS", "1")
    results, errors = run_sweep(parse_config(small(regime="joint", lambdas=[0.1])))
    assert errors == [] and len(results) == 1
    results, errors = run_sweep(parse_config(small(encoder={"widths": [8, 6]}, lambdas=[0.1])))
    assert errors == [] and len(results) == 1
