"""Synthetic concept data with a tunable completeness gap, splits, and JSONL IO.

Latent binary concepts ``z`` produce inputs ``x = A z + noise`` and a task
label equal to the parity of a fixed subset of ``z``. Only the first
``observed_concepts`` coordinates of ``z`` are exposed as concept labels, so
hiding part of the parity subset makes the concepts incomplete for the task.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
DATA_FILE = "dataset.jsonl"
MANIFEST_FILE = "manifest.json"


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 1000
    input_dim: int = 10
    n_concepts: int = 6
    observed_concepts: int = 4
    input_noise_std: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.n_concepts < 1:
            raise ValueError("n_concepts must be >= 1")
        if not 1 <= self.observed_concepts <= self.n_concepts:
            raise ValueError("observed_concepts must lie in [1, n_concepts]")
        if self.input_dim < self.n_concepts:
            raise ValueError("input_dim must be >= n_concepts")
        if self.input_noise_std < 0:
            raise ValueError("input_noise_std must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _as_rows(values, dtype, n: int) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim != 2:
        arr = arr.reshape(n, -1) if arr.size else arr.reshape(n, 0)
    if arr.shape[0] != n:
        raise ValueError(f"expected {n} rows, got {arr.shape[0]}")
    return arr


@dataclass
class Dataset:
    x: np.ndarray
    c: np.ndarray
    y: np.ndarray
    hc: np.ndarray | None = None
    hy: np.ndarray | None = None
    concept_classes: int = 2
    n_task_classes: int = 2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.x = _as_rows(self.x, np.float64, len(self.y))
        self.c = _as_rows(self.c, np.int64, len(self.y))
        if self.hc is not None:
            self.hc = np.asarray(self.hc, dtype=np.int64).reshape(self.c.shape)
        if self.hy is not None:
            self.hy = np.asarray(self.hy, dtype=np.int64).reshape(self.y.shape)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_concepts(self) -> int:
        return self.c.shape[1]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    @property
    def annotated(self) -> bool:
        return self.hc is not None and self.hy is not None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            x=self.x[idx],
            c=self.c[idx],
            y=self.y[idx],
            hc=None if self.hc is None else self.hc[idx],
            hy=None if self.hy is None else self.hy[idx],
        )

    def with_annotations(self, hc, hy) -> "Dataset":
        return replace(self, hc=np.asarray(hc), hy=np.asarray(hy))

    def with_inputs(self, x) -> "Dataset":
        return replace(self, x=np.asarray(x, dtype=np.float64))


def parity_subset(n_concepts: int, observed: int, rng: np.random.Generator) -> list[int]:
    size = math.ceil(n_concepts / 2)
    if observed < n_concepts:
        hidden = int(rng.integers(observed, n_concepts))
        others = [i for i in range(n_concepts) if i != hidden]
        chosen = [hidden, *rng.choice(others, size=size - 1, replace=False).tolist()]
    else:
        chosen = rng.choice(n_concepts, size=size, replace=False).tolist()
    return sorted(int(i) for i in chosen)


def generate(spec: SyntheticSpec) -> Dataset:
    structure_seq, sample_seq = np.random.SeedSequence(spec.seed).spawn(2)
    srng = np.random.default_rng(structure_seq)
    mixing = srng.uniform(-1.0, 1.0, size=(spec.input_dim, spec.n_concepts))
    subset = parity_subset(spec.n_concepts, spec.observed_concepts, srng)

    rng = np.random.default_rng(sample_seq)
    z = rng.integers(0, 2, size=(spec.n_samples, spec.n_concepts))
    x = z @ mixing.T
    if spec.input_noise_std > 0:
        x = x + rng.normal(0.0, spec.input_noise_std, size=x.shape)
    y = z[:, subset].sum(axis=1) % 2
    meta = {"spec": spec.to_dict(), "parity_subset": subset}
    return Dataset(x=x, c=z[:, : spec.observed_concepts], y=y, meta=meta)


def bayes_task_accuracy(n_concepts: int, observed: int, subset) -> float:
    """Best achievable task accuracy from the observed concepts alone,
    by enumerating every latent state."""
    counts: dict[tuple, list[int]] = {}
    for z in itertools.product((0, 1), repeat=n_concepts):
        y = sum(z[i] for i in subset) % 2
        counts.setdefault(z[:observed], [0, 0])[y] += 1
    return sum(max(v) for v in counts.values()) / 2**n_concepts


def split(dataset: Dataset, train_frac: float, val_frac: float = 0.0, seed: int = 0):
    """Seeded shuffle, then contiguous train / val / test cut."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must lie in (0, 1), got {train_frac}")
    if not 0.0 <= val_frac < 1.0:
        raise ValueError(f"val_frac must lie in [0, 1), got {val_frac}")
    if train_frac + val_frac > 1.0 + 1e-12:
        raise ValueError("train_frac + val_frac must not exceed 1")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_frac))
    n_val = min(int(round(n * val_frac)), n - n_train)
    return (
        dataset.subset(perm[:n_train]),
        dataset.subset(perm[n_train : n_train + n_val]),
        dataset.subset(perm[n_train + n_val :]),
    )


def manifest_for(dataset: Dataset) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "n_samples": len(dataset),
        "input_dim": dataset.input_dim,
        "n_concepts": dataset.n_concepts,
        "concept_classes": dataset.concept_classes,
        "n_task_classes": dataset.n_task_classes,
        "annotated": dataset.annotated,
        "meta": dataset.meta,
    }


def write_dataset(dataset: Dataset, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = out_dir / DATA_FILE
    manifest_path = out_dir / MANIFEST_FILE
    with data_path.open("w", encoding="utf-8") as fh:
        for i in range(len(dataset)):
            rec = {
                "x": dataset.x[i].tolist(),
                "c": dataset.c[i].tolist(),
                "y": int(dataset.y[i]),
                "hc": None if dataset.hc is None else dataset.hc[i].tolist(),
                "hy": None if dataset.hy is None else int(dataset.hy[i]),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    manifest_path.write_text(json.dumps(manifest_for(dataset), indent=2, sort_keys=True) + "\n")
    return data_path, manifest_path


def read_dataset(path) -> Dataset:
    """Read a dataset directory (or the path of its .jsonl file)."""
    path = Path(path)
    root = path.parent if path.suffix == ".jsonl" else path
    data_path = path if path.suffix == ".jsonl" else root / DATA_FILE
    try:
        manifest = json.loads((root / MANIFEST_FILE).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"malformed manifest: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset schema version {manifest.get('schema_version')!r}; "
            f"expected {SCHEMA_VERSION}"
        )
    d, nc = manifest["input_dim"], manifest["n_concepts"]
    xs, cs, ys, hcs, hys = [], [], [], [], []
    with data_path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            if len(rec.get("x", [])) != d:
                raise DatasetFormatError(f"line {line_no}: x has length {len(rec.get('x', []))}, manifest says {d}")
            if len(rec.get("c", [])) != nc:
                raise DatasetFormatError(
                    f"line {line_no}: c has length {len(rec.get('c', []))}, manifest n_concepts is {nc}"
                )
            if "y" not in rec:
                raise DatasetFormatError(f"line {line_no}: missing task label y")
            xs.append(rec["x"])
            cs.append(rec["c"])
            ys.append(rec["y"])
            hcs.append(rec.get("hc"))
            hys.append(rec.get("hy"))
    n = len(ys)
    if n != manifest["n_samples"]:
        raise DatasetFormatError(f"file holds {n} records, manifest says {manifest['n_samples']}")
    annotated = n > 0 and all(h is not None for h in hcs) and all(h is not None for h in hys)
    if manifest.get("annotated") and n > 0 and not annotated:
        raise DatasetFormatError("manifest marks the dataset annotated but some records lack hc/hy")
    return Dataset(
        x=np.array(xs, dtype=np.float64).reshape(n, d),
        c=np.array(cs, dtype=np.int64).reshape(n, nc),
        y=np.array(ys, dtype=np.int64),
        hc=np.array(hcs, dtype=np.int64).reshape(n, nc) if annotated else None,
        hy=np.array(hys, dtype=np.int64) if annotated else None,
        concept_classes=manifest.get("concept_classes", 2),
        n_task_classes=manifest.get("n_task_classes", 2),
        meta=manifest.get("meta", {}),
    )
