"""Simulated human experts with a fixed per-label accuracy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CONCEPT_STREAM = 0
TASK_STREAM = 1


@dataclass(frozen=True)
class ExpertSpec:
    kind: str = "oracle"
    accuracy: float = 1.0
    seed: int = 0
    # column index -> accuracy, for uniform_noise concept experts
    overrides: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("oracle", "uniform_noise"):
            raise ValueError(f"unknown expert kind {self.kind!r}; expected 'oracle' or 'uniform_noise'")
        for acc in [self.accuracy, *self.overrides.values()]:
            if not 0.0 < acc <= 1.0:
                raise ValueError(f"expert accuracy must lie in (0, 1], got {acc}")

    def accuracy_for(self, column: int) -> float:
        return self.overrides.get(column, self.accuracy)

    def to_dict(self) -> dict:
        if self.kind == "oracle":
            return {"kind": "oracle"}
        d = {"kind": self.kind, "accuracy": self.accuracy, "seed": self.seed}
        if self.overrides:
            d["overrides"] = {str(k): v for k, v in sorted(self.overrides.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertSpec":
        unknown = set(d) - {"kind", "accuracy", "seed", "overrides"}
        if unknown:
            raise ValueError(f"unknown expert keys: {sorted(unknown)}")
        overrides = {int(k): float(v) for k, v in d.get("overrides", {}).items()}
        return cls(
            kind=d.get("kind", "oracle"),
            accuracy=float(d.get("accuracy", 1.0)),
            seed=int(d.get("seed", 0)),
            overrides=overrides,
        )


ORACLE = ExpertSpec()


def simulate_labels(
    spec: ExpertSpec,
    truth,
    class_count: int,
    stream: tuple[int, ...] = (),
    accuracy: float | None = None,
) -> np.ndarray:
    """Expert labels for ``truth``: correct with probability ``accuracy``,
    otherwise uniform over the other ``class_count - 1`` classes.

    ``stream`` selects an independent random stream under the same seed.
    """
    truth = np.asarray(truth, dtype=np.int64)
    if class_count < 2:
        raise ValueError("class_count must be at least 2")
    if truth.size and (truth.min() < 0 or truth.max() >= class_count):
        raise ValueError(f"truth labels must lie in [0, {class_count})")
    if spec.kind == "oracle":
        return truth.copy()
    acc = spec.accuracy if accuracy is None else accuracy
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, *stream]))
    correct = rng.random(truth.shape) < acc
    offset = rng.integers(1, class_count, size=truth.shape)
    return np.where(correct, truth, (truth + offset) % class_count)


def annotate_dataset(dataset, concept_expert: ExpertSpec, task_expert: ExpertSpec):
    """Return a copy of ``dataset`` with expert concept (hc) and task (hy) labels."""
    if dataset.c is None or dataset.y is None:
        raise ValueError("dataset has no ground-truth concepts or task labels to annotate")
    hc = np.empty_like(dataset.c)
    for j in range(dataset.c.shape[1]):
        hc[:, j] = simulate_labels(
            concept_expert,
            dataset.c[:, j],
            dataset.concept_classes,
            stream=(CONCEPT_STREAM, j),
            accuracy=concept_expert.accuracy_for(j),
        )
    hy = simulate_labels(task_expert, dataset.y, dataset.n_task_classes, stream=(TASK_STREAM, 0))
    return dataset.with_annotations(hc, hy)
