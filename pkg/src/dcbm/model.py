"""Concept bottleneck models with deferral: heads, variants, and system inference.

Each concept and the task get their own MLP head. A deferring head emits
``K + 1`` logits, the last one meaning "hand this variable to the human".
At inference the concepts are decided and resolved first, and the task head
reads the resolved concept vector.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import PsiKind, _sigmoid, _softmax, readout
from .numkit import ParamSet, mlp_logits

DEFER = -1
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


class Variant(str, enum.Enum):
    BB = "bb"
    DBB = "dbb"
    CBM = "cbm"
    DCBM = "dcbm"
    DCBM_NC = "dcbm_nc"
    DCBM_NT = "dcbm_nt"

    @classmethod
    def parse(cls, name: "str | Variant") -> "Variant":
        if isinstance(name, Variant):
            return name
        key = str(name).lower().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown variant {name!r}; valid options: {valid}") from None

    @property
    def has_concepts(self) -> bool:
        return self not in (Variant.BB, Variant.DBB)

    @property
    def defer_concepts(self) -> bool:
        return self in (Variant.DCBM, Variant.DCBM_NT)

    @property
    def defer_task(self) -> bool:
        return self in (Variant.DBB, Variant.DCBM, Variant.DCBM_NC)


@dataclass
class DeferHead:
    params: ParamSet
    n_classes: int
    defer: bool

    def __post_init__(self):
        expected = self.n_classes + int(self.defer)
        if self.params.spec.output_width != expected:
            raise ValueError(
                f"head output width {self.params.spec.output_width} does not match "
                f"{self.n_classes} classes{' plus defer' if self.defer else ''}"
            )

    @property
    def input_width(self) -> int:
        return self.params.spec.input_width

    def logits(self, inputs) -> np.ndarray:
        return mlp_logits(self.params, inputs)

    def to_dict(self) -> dict:
        return {"n_classes": self.n_classes, "defer": self.defer, "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DeferHead":
        return cls(ParamSet.from_dict(d["params"]), int(d["n_classes"]), bool(d["defer"]))


@dataclass
class DcbmModel:
    variant: Variant
    psi: PsiKind
    concept_heads: list[DeferHead]
    task_head: DeferHead
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        self.psi = PsiKind.parse(self.psi)
        v = self.variant
        if v.has_concepts != bool(self.concept_heads):
            raise ValueError(f"variant {v.value} {'needs' if v.has_concepts else 'has no'} concept heads")
        if any(h.defer != v.defer_concepts for h in self.concept_heads):
            raise ValueError(f"concept head defer flags do not match variant {v.value}")
        if self.task_head.defer != v.defer_task:
            raise ValueError(f"task head defer flag does not match variant {v.value}")
        if self.concept_heads:
            widths = {h.input_width for h in self.concept_heads}
            if len(widths) != 1:
                raise ValueError("concept heads disagree on input width")
            if self.task_head.input_width != len(self.concept_heads):
                raise ValueError("task head input width must equal the number of concepts")

    @property
    def n_concepts(self) -> int:
        return len(self.concept_heads)

    @property
    def input_dim(self) -> int:
        heads = self.concept_heads or [self.task_head]
        return heads[0].input_width

    @property
    def joint(self) -> bool:
        return self.meta.get("regime") == "joint"

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "variant": self.variant.value,
            "psi": self.psi.value,
            "concept_heads": [h.to_dict() for h in self.concept_heads],
            "task_head": self.task_head.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DcbmModel":
        if not isinstance(d, dict):
            raise ModelFormatError("model document must be a JSON object")
        if d.get("version") != MODEL_VERSION:
            raise ModelFormatError(
                f"unsupported model version {d.get('version')!r}; expected version {MODEL_VERSION}"
            )
        try:
            return cls(
                variant=d["variant"],
                psi=d["psi"],
                concept_heads=[DeferHead.from_dict(h) for h in d["concept_heads"]],
                task_head=DeferHead.from_dict(d["task_head"]),
                meta=d.get("meta", {}),
            )
        except KeyError as exc:
            raise ModelFormatError(f"model document is missing key {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ModelFormatError(f"inconsistent model document: {exc}") from exc


def dumps_model(model: DcbmModel) -> str:
    return json.dumps(model.to_dict(), sort_keys=True, indent=1) + "\n"


def loads_model(text: str) -> DcbmModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"could not parse model document: {exc}") from exc
    return DcbmModel.from_dict(doc)


def save_model(model: DcbmModel, path) -> Path:
    path = Path(path)
    path.write_text(dumps_model(model), encoding="utf-8")
    return path


def load_model(path) -> DcbmModel:
    return loads_model(Path(path).read_text(encoding="utf-8"))


def head_decide(logits, defer_enabled: bool, n_classes: int | None = None):
    """Argmax decision; returns a class index or DEFER.

    Ties go to the lowest index, so the defer output (last) loses every tie.
    Accepts one logit vector or a batch of rows.
    """
    q = np.asarray(logits, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    K = q.shape[1] - 1 if n_classes is None else n_classes
    if defer_enabled:
        if q.shape[1] != K + 1:
            raise ValueError("a deferring head needs K + 1 logits")
        idx = np.argmax(q, axis=1)
        out = np.where(idx == K, DEFER, idx)
    else:
        out = np.argmax(q[:, :K], axis=1)
    return int(out[0]) if single else out


def resolve(outcome, expert_label):
    """The model's class when it did not defer, otherwise the expert's label."""
    outcome = np.asarray(outcome)
    res = np.where(outcome == DEFER, expert_label, outcome)
    return int(res) if res.ndim == 0 else res


def joint_soft_concepts(concept_probs, defer_probs, expert_labels) -> np.ndarray:
    """Mixture g1 * (1 - g_defer) + h * g_defer, elementwise."""
    g1 = np.asarray(concept_probs, dtype=np.float64)
    gd = np.asarray(defer_probs, dtype=np.float64)
    h = np.asarray(expert_labels, dtype=np.float64)
    for name, arr in (("concept", g1), ("defer", gd)):
        if np.any((arr < 0) | (arr > 1)) or not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} probabilities must lie in [0, 1]")
    return g1 * (1.0 - gd) + h * gd


def soft_concept_and_grad(kind: PsiKind | str, logits, h, defer: bool = True):
    """Soft concept value of binary heads and its gradient w.r.t. the logits.

    Returns (values (n,), dvalues/dlogits (n, width)).
    """
    kind = PsiKind.parse(kind)
    Q = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    h = np.asarray(h, dtype=np.float64)
    n = Q.shape[0]
    g_p1 = np.zeros_like(Q)
    if not defer:
        s = _softmax(Q)
        p1 = s[:, 1]
        g_p1[:, 0] = -p1 * (1 - p1)
        g_p1[:, 1] = p1 * (1 - p1)
        return p1, g_p1
    if Q.shape[1] != 3:
        raise ValueError("soft concepts need binary deferring heads (3 logits)")
    g_d = np.zeros_like(Q)
    if kind is PsiKind.OVA:
        sig = _sigmoid(Q)
        s0, s1 = sig[:, 0], sig[:, 1]
        tot = s0 + s1
        p1 = s1 / tot
        d = sig[:, 2]
        g_p1[:, 0] = -s1 * s0 * (1 - s0) / tot**2
        g_p1[:, 1] = s1 * (1 - s1) * s0 / tot**2
        g_d[:, 2] = d * (1 - d)
    else:
        p1 = _sigmoid(Q[:, 1] - Q[:, 0])
        g_p1[:, 0] = -p1 * (1 - p1)
        g_p1[:, 1] = p1 * (1 - p1)
        if kind is PsiKind.CE:
            s = _softmax(Q)
            d = s[:, 2]
            g_d = d[:, None] * (np.eye(3)[2][None, :] - s)
        else:
            # binary asymmetric softmax: defer competes with the losing class only
            rest = np.where(Q[:, 0] >= Q[:, 1], 1, 0)
            d = _sigmoid(Q[:, 2] - Q[np.arange(n), rest])
            g_d[:, 2] = d * (1 - d)
            g_d[np.arange(n), rest] = -d * (1 - d)
    value = p1 * (1 - d) + h * d
    grad = (1 - d)[:, None] * g_p1 + (h - p1)[:, None] * g_d
    return value, grad


@dataclass
class SystemPrediction:
    """Per-row outcomes of the deferring system (leading axis = sample)."""

    concept_outcome: np.ndarray
    concept_resolved: np.ndarray
    concept_probs: np.ndarray
    concept_defer_prob: np.ndarray
    task_outcome: np.ndarray
    task_resolved: np.ndarray
    task_probs: np.ndarray
    task_defer_prob: np.ndarray
    task_inputs: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.task_outcome)

    @property
    def concept_deferred(self) -> np.ndarray:
        return self.concept_outcome == DEFER

    @property
    def task_deferred(self) -> np.ndarray:
        return self.task_outcome == DEFER

    @property
    def has_concepts(self) -> bool:
        return self.concept_outcome.shape[1] > 0

    def take(self, idx) -> "SystemPrediction":
        idx = np.asarray(idx)
        return SystemPrediction(
            *(getattr(self, f)[idx] for f in (
                "concept_outcome", "concept_resolved", "concept_probs", "concept_defer_prob",
                "task_outcome", "task_resolved", "task_probs", "task_defer_prob")),
            task_inputs=None if self.task_inputs is None else self.task_inputs[idx],
        )


def concept_stage(model: DcbmModel, X: np.ndarray, hc: np.ndarray | None):
    """Decide and resolve every concept head for a batch."""
    n = X.shape[0]
    nc = model.n_concepts
    outcome = np.zeros((n, nc), dtype=np.int64)
    probs = np.zeros((n, nc, max((h.n_classes for h in model.concept_heads), default=0)))
    defer_prob = np.zeros((n, nc))
    logits = []
    for j, head in enumerate(model.concept_heads):
        q = head.logits(X)
        logits.append(q)
        outcome[:, j] = head_decide(q, head.defer, head.n_classes)
        cp, dp = readout(model.psi, q, head.defer)
        probs[:, j, : head.n_classes] = cp
        defer_prob[:, j] = dp
    resolved = outcome.copy() if hc is None else resolve(outcome, hc)
    return outcome, resolved, probs, defer_prob, logits


def task_inputs_for(model: DcbmModel, X, resolved, logits, hc) -> np.ndarray:
    if not model.variant.has_concepts:
        return X
    if model.joint:
        cols = []
        for j, head in enumerate(model.concept_heads):
            h = hc[:, j] if hc is not None else np.zeros(X.shape[0])
            cols.append(soft_concept_and_grad(model.psi, logits[j], h, head.defer)[0])
        return np.stack(cols, axis=1)
    return resolved.astype(np.float64)


def predict_batch(model: DcbmModel, X, hc=None, hy=None) -> SystemPrediction:
    """Run the deferring system on a batch of inputs with expert labels."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.input_dim:
        raise ValueError(f"expected inputs of width {model.input_dim}, got {X.shape[1]}")
    n = X.shape[0]
    if model.variant.defer_concepts and hc is None:
        raise ValueError("expert concept labels are required for concept heads that may defer")
    if model.variant.defer_task and hy is None:
        raise ValueError("an expert task label is required for a task head that may defer")
    if hc is not None:
        hc = np.asarray(hc, dtype=np.int64).reshape(n, -1)
    outcome, resolved, probs, dprob, logits = concept_stage(model, X, hc)
    t_in = task_inputs_for(model, X, resolved, logits, hc)
    tq = model.task_head.logits(t_in)
    t_out = head_decide(tq, model.task_head.defer, model.task_head.n_classes)
    t_res = t_out.copy() if hy is None else resolve(t_out, np.asarray(hy).reshape(n))
    t_probs, t_dprob = readout(model.psi, tq, model.task_head.defer)
    return SystemPrediction(outcome, resolved, probs, dprob, t_out, t_res, t_probs, t_dprob, t_in)


def system_predict(model: DcbmModel, x, expert_concepts=None, expert_task=None) -> SystemPrediction:
    """Single-row convenience wrapper around :func:`predict_batch`."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    hc = None if expert_concepts is None else np.asarray(expert_concepts).reshape(1, -1)
    hy = None if expert_task is None else np.asarray([expert_task])
    return predict_batch(model, x, hc, hy)


def task_distribution(model: DcbmModel, concept_values) -> np.ndarray:
    """Task class distribution with the task head fed the given concept vectors."""
    q = model.task_head.logits(np.atleast_2d(np.asarray(concept_values, dtype=np.float64)))
    return readout(model.psi, q, model.task_head.defer)[0]
