"""Dense numerics for small feed-forward networks.

Everything is float64 numpy. Networks are plain MLPs with a leaky rectifier on
every layer except the last, and backward passes are written out by hand.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

DEFAULT_SLOPE = 0.01


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class MLPSpec:
    layer_widths: tuple[int, ...]
    activation_slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activation_slope", float(self.activation_slope))

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation_slope": self.activation_slope}

    @classmethod
    def from_dict(cls, d: dict) -> "MLPSpec":
        return cls(tuple(d["layer_widths"]), d.get("activation_slope", DEFAULT_SLOPE))


@dataclass
class ParamSet:
    """Weights (out x in) and biases (out,) for each layer of an MLP."""

    spec: MLPSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ValueError("layer count does not match spec")
        w = self.spec.layer_widths
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (w[i + 1], w[i]) or b.shape != (w[i + 1],):
                raise ValueError(
                    f"layer {i}: expected W {(w[i + 1], w[i])} and b {(w[i + 1],)}, "
                    f"got {W.shape} and {b.shape}"
                )

    def arrays(self) -> Iterator[np.ndarray]:
        for W, b in zip(self.weights, self.biases):
            yield W
            yield b

    def copy(self) -> "ParamSet":
        return ParamSet(self.spec, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "ParamSet":
        return ParamSet(
            self.spec, [np.zeros_like(W) for W in self.weights], [np.zeros_like(b) for b in self.biases]
        )

    def scaled(self, factor: float) -> "ParamSet":
        return ParamSet(self.spec, [W * factor for W in self.weights], [b * factor for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def equals(self, other: "ParamSet") -> bool:
        return self.spec == other.spec and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    def to_dict(self) -> dict:
        # json writes floats with shortest round-trip repr, so this is lossless
        return {
            "spec": self.spec.to_dict(),
            "layers": [{"w": W.tolist(), "b": b.tolist()} for W, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSet":
        spec = MLPSpec.from_dict(d["spec"])
        weights = [np.array(layer["w"], dtype=np.float64) for layer in d["layers"]]
        biases = [np.array(layer["b"], dtype=np.float64) for layer in d["layers"]]
        return cls(spec, weights, biases)


def mlp_init(spec: MLPSpec, seed: int | np.random.Generator) -> ParamSet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ParamSet(spec, weights, biases)


def leaky_relu(z: np.ndarray, slope: float = DEFAULT_SLOPE) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    preacts: list[np.ndarray] = field(default_factory=list)  # pre-activation of each layer


def mlp_forward(params: ParamSet, inputs) -> tuple[np.ndarray, ForwardCache]:
    h = np.asarray(inputs, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.spec.input_width:
        raise ValueError(
            f"expected inputs of shape (n, {params.spec.input_width}), got {h.shape}"
        )
    cache = ForwardCache()
    slope = params.spec.activation_slope
    last = params.spec.n_layers - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ W.T + b
        cache.preacts.append(z)
        h = z if i == last else leaky_relu(z, slope)
    return h, cache


def mlp_logits(params: ParamSet, inputs) -> np.ndarray:
    return mlp_forward(params, inputs)[0]


def mlp_backward(
    params: ParamSet, cache: ForwardCache, dlogits, *, return_input_grad: bool = False
):
    """Gradients of a scalar loss given its gradient w.r.t. the logits.

    With ``return_input_grad`` the gradient w.r.t. the network input is
    returned as well, as ``(grads, dinputs)``.
    """
    delta = np.asarray(dlogits, dtype=np.float64)
    expected = cache.preacts[-1].shape
    if delta.shape != expected:
        raise ValueError(f"dlogits shape {delta.shape} does not match logits shape {expected}")
    slope = params.spec.activation_slope
    n = params.spec.n_layers
    gW: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        if i != n - 1:
            delta = delta * np.where(cache.preacts[i] > 0, 1.0, slope)
        gW[i] = delta.T @ cache.inputs[i]
        gb[i] = delta.sum(axis=0)
        if i > 0 or return_input_grad:
            delta = delta @ params.weights[i]
    grads = ParamSet(params.spec, gW, gb)
    if return_input_grad:
        return grads, delta
    return grads


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.kind!r}; expected 'adam' or 'adamw'")
        if self.kind == "adam" and self.weight_decay != 0.0:
            raise ValueError("weight decay is only supported by adamw")


def optimizer_step(state: OptimizerState, params: ParamSet, grads: ParamSet) -> ParamSet:
    """One Adam / AdamW update with bias correction. Mutates ``state`` only."""
    if params.spec != grads.spec:
        raise ValueError("parameter and gradient specs differ")
    p_arrays = list(params.arrays())
    g_arrays = list(grads.arrays())
    for p, g in zip(p_arrays, g_arrays):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in p_arrays]
        state.v = [np.zeros_like(p) for p in p_arrays]
    elif [a.shape for a in state.m] != [p.shape for p in p_arrays]:
        raise ValueError("optimizer accumulators do not match parameter shapes")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    out = []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        new = p * (1.0 - state.lr * state.weight_decay) if state.kind == "adamw" else p.copy()
        new -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out.append(new)
    return ParamSet(params.spec, out[0::2], out[1::2])


def finite_diff_check(
    loss_and_grad: Callable[[ParamSet], tuple[float, ParamSet]],
    params: ParamSet,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad`` returns the scalar loss and its analytic gradient.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    value, analytic = loss_and_grad(params)
    if not math.isfinite(value):
        raise ValueError("loss is not finite at the base point")
    probe = params.copy()
    worst = 0.0
    for p_arr, g_arr in zip(probe.arrays(), analytic.arrays()):
        flat_p = p_arr.reshape(-1)
        flat_g = g_arr.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            up = loss_and_grad(probe)[0]
            flat_p[i] = orig - eps
            down = loss_and_grad(probe)[0]
            flat_p[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise ValueError("loss became non-finite during finite differencing")
            numeric = (up - down) / (2 * eps)
            err = abs(flat_g[i] - numeric) / max(1e-8, abs(flat_g[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
