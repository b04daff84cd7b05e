"""Per-instance deferral explanations.

For one input, report which concepts were handed to the human and how the task
distribution looks after deferring, without deferring, and from the true
concepts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DcbmModel, head_decide, predict_batch, task_distribution


@dataclass
class DeferredConcept:
    concept: int
    defer_prob: float
    model_prob: float  # model's probability that the concept is 1
    expert_label: int
    expert_correct: bool | None
    model_correct: bool | None


def top_k(dist: np.ndarray, k: int) -> list[tuple[int, float]]:
    order = sorted(range(len(dist)), key=lambda i: (-dist[i], i))[:k]
    return [(int(i), float(dist[i])) for i in order]


@dataclass
class ExplainReport:
    instance: int | str
    deferred: list[DeferredConcept]
    task_deferred: bool
    after_deferral: np.ndarray
    without_deferral: np.ndarray
    from_ground_truth: np.ndarray | None
    top_k: int

    def to_dict(self) -> dict:
        d = {
            "instance": self.instance,
            "task_deferred": self.task_deferred,
            "deferred_concepts": [vars(c) for c in self.deferred],
            "after_deferral": {
                "top_k": top_k(self.after_deferral, self.top_k),
                "distribution": self.after_deferral.tolist(),
            },
            "without_deferral": {
                "top_k": top_k(self.without_deferral, self.top_k),
                "distribution": self.without_deferral.tolist(),
            },
        }
        if self.from_ground_truth is not None:
            d["from_ground_truth"] = {
                "top_k": top_k(self.from_ground_truth, self.top_k),
                "distribution": self.from_ground_truth.tolist(),
            }
        return d


def explain_instance(
    model: DcbmModel,
    x,
    expert_concepts,
    expert_task=None,
    ground_truth: tuple | None = None,
    top_k: int = 5,
    instance: int | str = 0,
) -> ExplainReport:
    """Explain one prediction. ``ground_truth`` is an optional ``(c, y)`` pair."""
    if not model.variant.has_concepts:
        raise ValueError(f"variant has no concept heads: {model.variant.value}")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    hc = np.asarray(expert_concepts, dtype=np.int64).reshape(1, -1)
    hy = None if expert_task is None else np.asarray([expert_task])
    if model.variant.defer_task and hy is None:
        # the task decision is not needed for the distributions; any label works
        hy = np.zeros(1, dtype=np.int64)
    pred = predict_batch(model, x, hc, hy)
    truth_c = None if ground_truth is None else np.asarray(ground_truth[0], dtype=np.int64).reshape(-1)

    deferred = []
    for j in np.flatnonzero(pred.concept_deferred[0]):
        probs = pred.concept_probs[0, j]
        model_label = int(np.argmax(probs))
        deferred.append(
            DeferredConcept(
                concept=int(j),
                defer_prob=float(pred.concept_defer_prob[0, j]),
                model_prob=float(probs[1]) if probs.shape[0] > 1 else float(probs[0]),
                expert_label=int(hc[0, j]),
                expert_correct=None if truth_c is None else bool(hc[0, j] == truth_c[j]),
                model_correct=None if truth_c is None else bool(model_label == truth_c[j]),
            )
        )
    deferred.sort(key=lambda d: (-d.defer_prob, d.concept))

    after = pred.task_probs[0]
    own = np.array(
        [head_decide(head.logits(x)[0], False, head.n_classes) for head in model.concept_heads],
        dtype=np.float64,
    )
    without = task_distribution(model, own)[0]
    from_truth = None if truth_c is None else task_distribution(model, truth_c)[0]
    return ExplainReport(
        instance=instance,
        deferred=deferred,
        task_deferred=bool(pred.task_deferred[0]),
        after_deferral=after,
        without_deferral=without,
        from_ground_truth=from_truth,
        top_k=top_k,
    )
