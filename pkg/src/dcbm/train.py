"""Training loops for concept bottleneck models with deferral.

The independent regime trains every head on its own inputs and targets, with
no parameters or gradients shared between heads; the task head learns from
ground-truth concepts. The joint regime wires the heads together through
soft concepts and is kept for comparison only.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import Dataset
from .losses import PsiKind, batch_loss_and_grad, check_lambda, class_loss_and_grad
from .model import DcbmModel, DeferHead, Variant, soft_concept_and_grad
from .numkit import MLPSpec, OptimizerState, ParamSet, mlp_backward, mlp_forward, mlp_init, optimizer_step

log = logging.getLogger(__name__)

CONCEPT_KEY = 0
TASK_KEY = 1
JOINT_KEY = 2
ENCODER_KEY = 3


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    lr_halve_every: int | None = None
    psi: str = "ce"
    lam: float = 0.0
    # "task", "concept" or "concept:<index>" -> lambda
    lam_overrides: dict[str, float] = field(default_factory=dict)
    early_stop_patience: int | None = None
    concept_class_weighting: bool = False
    label_smoothing: bool = False
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.lr_halve_every is not None and self.lr_halve_every < 1:
            raise ValueError("lr_halve_every must be >= 1")
        self.psi = PsiKind.parse(self.psi).value
        self.lam = check_lambda(self.lam)
        for v in self.lam_overrides.values():
            check_lambda(v)
        self.hidden = tuple(int(h) for h in self.hidden)
        OptimizerState(self.optimizer, weight_decay=self.weight_decay)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def lam_for(self, kind: str, index: int = 0) -> float:
        if kind == "concept":
            for key in (f"concept:{index}", "concept"):
                if key in self.lam_overrides:
                    return self.lam_overrides[key]
        elif "task" in self.lam_overrides:
            return self.lam_overrides["task"]
        return self.lam

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(self.optimizer, lr=self.lr, weight_decay=self.weight_decay)

    def lr_at(self, epoch: int) -> float:
        if self.lr_halve_every is None:
            return self.lr
        return self.lr * 0.5 ** (epoch // self.lr_halve_every)


def new_head(input_dim: int, n_classes: int, defer: bool, hidden, seed, stream) -> DeferHead:
    spec = MLPSpec((input_dim, *hidden, n_classes + int(defer)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0, *stream]))
    return DeferHead(mlp_init(spec, rng), n_classes, defer)


def head_loss_fn(head: DeferHead, psi: str, lam: float, label_smoothing: bool = False):
    """Return f(logits, labels, human_correct, weights) -> (loss, dlogits)."""
    if head.defer:
        def fn(q, labels, hcorr, w):
            return batch_loss_and_grad(psi, q, labels, hcorr, lam, w, label_smoothing=label_smoothing)
    else:
        def fn(q, labels, hcorr, w):
            return class_loss_and_grad(q, labels, w)
    return fn


def train_head(
    head: DeferHead,
    inputs,
    labels,
    human_correct,
    cfg: TrainConfig,
    *,
    lam: float | None = None,
    sample_weights=None,
    val: tuple | None = None,
    stream: tuple[int, ...] = (0,),
) -> tuple[DeferHead, list[dict]]:
    """Mini-batch training of one head on the penalized defer loss.

    ``val`` is ``(inputs, labels, human_correct)``; with it and a patience set,
    training stops after that many epochs without validation improvement and
    the best-validation parameters are returned.
    """
    X = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    hcorr = np.asarray(human_correct, dtype=bool)
    n = X.shape[0]
    if labels.shape != (n,) or hcorr.shape != (n,):
        raise ValueError("inputs, labels and human_correct must have the same number of rows")
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    lam = cfg.lam if lam is None else check_lambda(lam)
    loss_fn = head_loss_fn(head, cfg.psi, lam, cfg.label_smoothing)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, *stream]))
    opt = cfg.optimizer_state()
    params = head.params.copy()
    history: list[dict] = []
    best = (math.inf, params)
    stale = 0
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        perm = rng.permutation(n)
        total, weight_seen = 0.0, 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            q, cache = mlp_forward(params, X[idx])
            loss, dq = loss_fn(q, labels[idx], hcorr[idx], w[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            params = optimizer_step(opt, params, mlp_backward(params, cache, dq))
            bw = w[idx].sum()
            total += loss * bw
            weight_seen += bw
        record = {"epoch": epoch, "train_loss": total / weight_seen}
        if val is not None:
            vq = mlp_forward(params, val[0])[0]
            vloss = loss_fn(vq, val[1], np.asarray(val[2], dtype=bool), None)[0]
            record["val_loss"] = vloss
            if vloss < best[0]:
                best, stale = (vloss, params.copy()), 0
            else:
                stale += 1
        history.append(record)
        if val is not None and cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
            log.debug("early stop after epoch %d", epoch)
            break
    if val is not None and cfg.early_stop_patience is not None:
        params = best[1]
    return DeferHead(params, head.n_classes, head.defer), history


def compute_concept_weights(concepts) -> np.ndarray:
    """Positive-class weight per binary concept: #neg / #pos clamped to [0.1, 10]."""
    c = np.asarray(concepts, dtype=np.int64)
    if c.size and (c.min() < 0 or c.max() > 1):
        raise ValueError("concept weighting needs binary concepts")
    pos = c.sum(axis=0).astype(np.float64)
    neg = c.shape[0] - pos
    out = np.empty(c.shape[1])
    for j in range(c.shape[1]):
        if pos[j] == 0 or neg[j] == 0:
            warnings.warn(f"concept {j} is constant in the training split; weight clamped", stacklevel=2)
        ratio = neg[j] / pos[j] if pos[j] > 0 else math.inf
        out[j] = min(10.0, max(0.1, ratio))
    return out


def _concept_sample_weights(train: Dataset, cfg: TrainConfig):
    if not cfg.concept_class_weighting:
        return [None] * train.n_concepts
    pos_w = compute_concept_weights(train.c)
    return [np.where(train.c[:, j] == 1, pos_w[j], 1.0) for j in range(train.n_concepts)]


def _require_annotations(variant: Variant, ds: Dataset) -> None:
    needs = variant.defer_concepts or variant.defer_task
    if needs and not ds.annotated:
        raise ValueError(f"variant {variant.value} needs expert annotations (hc, hy) in the dataset")


def _human_correct(expert, truth, enabled: bool) -> np.ndarray:
    if not enabled:
        return np.zeros(len(truth), dtype=bool)
    return np.asarray(expert) == np.asarray(truth)


def train_dcbm_independent(
    variant: Variant | str, train: Dataset, cfg: TrainConfig, val: Dataset | None = None
) -> tuple[DcbmModel, dict[str, list[dict]]]:
    variant = Variant.parse(variant)
    _require_annotations(variant, train)
    if val is not None and len(val) == 0:
        val = None
    histories: dict[str, list[dict]] = {}
    concept_heads = []
    if variant.has_concepts:
        weights = _concept_sample_weights(train, cfg)
        for j in range(train.n_concepts):
            defer = variant.defer_concepts
            head = new_head(train.input_dim, train.concept_classes, defer, cfg.hidden, cfg.seed, (CONCEPT_KEY, j))
            hcorr = _human_correct(train.hc[:, j] if defer else None, train.c[:, j], defer)
            vdata = None
            if val is not None:
                vdata = (val.x, val.c[:, j], _human_correct(val.hc[:, j] if defer else None, val.c[:, j], defer))
            head, hist = train_head(
                head, train.x, train.c[:, j], hcorr, cfg,
                lam=cfg.lam_for("concept", j), sample_weights=weights[j], val=vdata, stream=(CONCEPT_KEY, j),
            )
            concept_heads.append(head)
            histories[f"concept_{j}"] = hist
        task_in, val_in = train.c.astype(np.float64), None if val is None else val.c.astype(np.float64)
    else:
        task_in, val_in = train.x, None if val is None else val.x
    defer = variant.defer_task
    head = new_head(task_in.shape[1], train.n_task_classes, defer, cfg.hidden, cfg.seed, (TASK_KEY, 0))
    hcorr = _human_correct(train.hy if defer else None, train.y, defer)
    vdata = None
    if val is not None:
        vdata = (val_in, val.y, _human_correct(val.hy if defer else None, val.y, defer))
    task_head, hist = train_head(
        head, task_in, train.y, hcorr, cfg, lam=cfg.lam_for("task"), val=vdata, stream=(TASK_KEY, 0)
    )
    histories["task"] = hist
    meta = {"regime": "independent", "consistent": True, "train_config": cfg.to_dict(), "lambda": cfg.lam}
    return DcbmModel(variant, cfg.psi, concept_heads, task_head, meta), histories


def joint_loss_and_grads(model: DcbmModel, cfg: TrainConfig, X, c, y, hc, hy, concept_weights=None):
    """Summed concept losses plus the task loss on soft concepts.

    Returns (loss, concept head grads, task head grads). Task gradients flow
    back into the concept heads through the soft-concept mixture.
    """
    n = X.shape[0]
    caches, logits, soft, dsoft = [], [], [], []
    loss = 0.0
    dlogits = []
    for j, head in enumerate(model.concept_heads):
        q, cache = mlp_forward(head.params, X)
        caches.append(cache)
        logits.append(q)
        hcorr = _human_correct(hc[:, j] if head.defer else None, c[:, j], head.defer)
        fn = head_loss_fn(head, cfg.psi, cfg.lam_for("concept", j), cfg.label_smoothing)
        w = None if concept_weights is None else concept_weights[j]
        lj, dq = fn(q, c[:, j], hcorr, w)
        loss += lj
        dlogits.append(dq)
        value, grad = soft_concept_and_grad(model.psi, q, hc[:, j] if hc is not None else np.zeros(n), head.defer)
        soft.append(value)
        dsoft.append(grad)
    G = np.stack(soft, axis=1)
    tq, tcache = mlp_forward(model.task_head.params, G)
    thead = model.task_head
    fn = head_loss_fn(thead, cfg.psi, cfg.lam_for("task"), cfg.label_smoothing)
    lt, dtq = fn(tq, y, _human_correct(hy if thead.defer else None, y, thead.defer), None)
    loss += lt
    tgrads, dG = mlp_backward(thead.params, tcache, dtq, return_input_grad=True)
    cgrads = []
    for j, head in enumerate(model.concept_heads):
        dq = dlogits[j] + dsoft[j] * dG[:, j : j + 1]
        cgrads.append(mlp_backward(head.params, caches[j], dq))
    return loss, cgrads, tgrads


def train_dcbm_joint(
    train: Dataset, cfg: TrainConfig, variant: Variant | str = Variant.DCBM
) -> tuple[DcbmModel, dict[str, list[dict]]]:
    """Joint training through soft concepts. Not consistency-preserving."""
    variant = Variant.parse(variant)
    if not variant.has_concepts:
        raise ValueError("joint training needs a variant with concept heads")
    if train.concept_classes != 2:
        raise ValueError("joint training supports binary concepts only")
    _require_annotations(variant, train)
    concept_heads = [
        new_head(train.input_dim, 2, variant.defer_concepts, cfg.hidden, cfg.seed, (CONCEPT_KEY, j))
        for j in range(train.n_concepts)
    ]
    task_head = new_head(train.n_concepts, train.n_task_classes, variant.defer_task, cfg.hidden, cfg.seed, (TASK_KEY, 0))
    meta = {"regime": "joint", "consistent": False, "train_config": cfg.to_dict(), "lambda": cfg.lam}
    model = DcbmModel(variant, cfg.psi, concept_heads, task_head, meta)
    weights = _concept_sample_weights(train, cfg)
    weights = None if weights[0] is None else weights
    opts = [cfg.optimizer_state() for _ in range(train.n_concepts + 1)]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, JOINT_KEY]))
    n = len(train)
    hc = train.hc if train.hc is not None else train.c
    history = []
    for epoch in range(cfg.epochs):
        for o in opts:
            o.lr = cfg.lr_at(epoch)
        perm = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            bw = None if weights is None else [w[idx] for w in weights]
            loss, cgrads, tgrads = joint_loss_and_grads(
                model, cfg, train.x[idx], train.c[idx], train.y[idx], hc[idx],
                None if train.hy is None else train.hy[idx], bw,
            )
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            for j, head in enumerate(model.concept_heads):
                head.params = optimizer_step(opts[j], head.params, cgrads[j])
            model.task_head.params = optimizer_step(opts[-1], model.task_head.params, tgrads)
            total += loss * len(idx)
        history.append({"epoch": epoch, "train_loss": total / n})
    return model, {"joint": history}


@dataclass(frozen=True)
class FrozenEncoder:
    params: ParamSet

    def __post_init__(self):
        for arr in self.params.arrays():
            arr.flags.writeable = False

    def embed(self, X) -> np.ndarray:
        return mlp_forward(self.params, np.asarray(X, dtype=np.float64))[0]


def pretrain_frozen_encoder(
    dataset: Dataset, encoder_spec: MLPSpec, cfg: TrainConfig, head_hidden: int = 32
) -> tuple[FrozenEncoder, Dataset]:
    """Train encoder + throwaway task head with plain cross-entropy, then freeze
    the encoder and return the dataset with embedded inputs."""
    if encoder_spec.input_width != dataset.input_dim:
        raise ValueError("encoder input width must equal the dataset input dimension")
    seed_seq = np.random.SeedSequence([cfg.seed, 0, ENCODER_KEY])
    enc_rng, head_rng = (np.random.default_rng(s) for s in seed_seq.spawn(2))
    enc = mlp_init(encoder_spec, enc_rng)
    head = mlp_init(MLPSpec((encoder_spec.output_width, head_hidden, dataset.n_task_classes)), head_rng)
    opt_e, opt_h = cfg.optimizer_state(), cfg.optimizer_state()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, ENCODER_KEY]))
    n = len(dataset)
    for epoch in range(cfg.epochs):
        opt_e.lr = opt_h.lr = cfg.lr_at(epoch)
        perm = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            z, ecache = mlp_forward(enc, dataset.x[idx])
            q, hcache = mlp_forward(head, z)
            loss, dq = class_loss_and_grad(q, dataset.y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            hgrads, dz = mlp_backward(head, hcache, dq, return_input_grad=True)
            egrads = mlp_backward(enc, ecache, dz)
            head = optimizer_step(opt_h, head, hgrads)
            enc = optimizer_step(opt_e, enc, egrads)
    encoder = FrozenEncoder(enc)
    return encoder, dataset.with_inputs(encoder.embed(dataset.x))

