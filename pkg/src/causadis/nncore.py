"""Minimal dense-network core on float64 numpy.

Forward passes cache exactly what the hand-written reverse pass needs;
no tape, no graph. Everything is deterministic given parameter values
and inputs, and gradient_check verifies any scalar objective against
central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import DataError, NumericError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _relu(x):
    return np.maximum(x, 0.0)


def _drelu(x, y):
    del y
    return (x > 0.0).astype(np.float64)


def _tanh(x):
    return np.tanh(x)


def _dtanh(x, y):
    del x
    return 1.0 - y * y


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _dgelu(x, y):
    del y
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def _identity(x):
    return x


def _didentity(x, y):
    del y
    return np.ones_like(x)


ACTIVATIONS = {
    "relu": (_relu, _drelu),
    "tanh": (_tanh, _dtanh),
    "gelu": (_gelu, _dgelu),
    "none": (_identity, _didentity),
}


class ParamTensor:
    """A learnable array plus its gradient accumulator."""

    __slots__ = ("values", "grad")

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad.fill(0.0)


@dataclass(frozen=True)
class MlpSpec:
    """Width chain [in, hidden..., out] plus activation choices."""

    layer_widths: tuple
    activation: str = "relu"
    final_activation: str = "none"

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise DataError("MlpSpec needs at least one layer (two widths)")
        if any(w < 1 for w in self.layer_widths):
            raise DataError("layer widths must be positive")
        if self.activation not in ("relu", "tanh", "gelu"):
            raise DataError(f"unknown activation {self.activation!r}")
        if self.final_activation not in ("none", "tanh"):
            raise DataError(f"unknown final activation {self.final_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]


class Mlp:
    """Affine + activation stack with explicit forward cache and reverse pass."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = np.sqrt(6.0 / fan_in)  # uniform fan-in scaling
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(ParamTensor(w))
            self.biases.append(ParamTensor(np.zeros(fan_out)))

    def params(self, prefix: str = "") -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}L{i}.W"] = w
            out[f"{prefix}L{i}.b"] = b
        return out

    def zero_grad(self):
        for p in self.weights + self.biases:
            p.zero_grad()


def mlp_forward(mlp: Mlp, x: np.ndarray):
    """Run the stack; returns (output, cache) where cache feeds mlp_backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.spec.in_width:
        raise DataError(
            f"input shape {x.shape} does not match expected (n, {mlp.spec.in_width})"
        )
    spec = mlp.spec
    acts = [x]
    pre = []
    h = x
    for i in range(spec.n_layers):
        z = h @ mlp.weights[i].values + mlp.biases[i].values
        name = spec.activation if i < spec.n_layers - 1 else spec.final_activation
        h = ACTIVATIONS[name][0](z)
        pre.append(z)
        acts.append(h)
    cache = (mlp, acts, pre)
    return h, cache


def mlp_backward(cache, upstream: np.ndarray) -> np.ndarray:
    """Accumulate parameter grads for a cached forward; returns d(loss)/d(input)."""
    mlp, acts, pre = cache
    spec = mlp.spec
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != acts[-1].shape:
        raise DataError(f"upstream shape {upstream.shape} != output shape {acts[-1].shape}")
    d = upstream
    for i in range(spec.n_layers - 1, -1, -1):
        name = spec.activation if i < spec.n_layers - 1 else spec.final_activation
        dz = d * ACTIVATIONS[name][1](pre[i], acts[i + 1])
        mlp.weights[i].grad += acts[i].T @ dz
        mlp.biases[i].grad += dz.sum(axis=0)
        d = dz @ mlp.weights[i].values.T
    return d


def l2_normalize(batch: np.ndarray, guard: float = 1e-12) -> np.ndarray:
    """Row-normalize to unit norm; rows with norm < guard pass through unchanged."""
    batch = np.asarray(batch, dtype=np.float64)
    norms = np.linalg.norm(batch, axis=-1, keepdims=True)
    safe = np.where(norms < guard, 1.0, norms)
    return np.where(norms < guard, batch, batch / safe)


def l2_normalize_forward(batch: np.ndarray, guard: float = 1e-12):
    batch = np.asarray(batch, dtype=np.float64)
    norms = np.linalg.norm(batch, axis=-1, keepdims=True)
    small = norms < guard
    safe = np.where(small, 1.0, norms)
    y = np.where(small, batch, batch / safe)
    return y, (y, safe, small)


def l2_normalize_backward(cache, upstream: np.ndarray) -> np.ndarray:
    """d/dx of row normalization: (g - y (y.g)) / ||x||; guarded rows pass g through."""
    y, safe, small = cache
    inner = np.sum(y * upstream, axis=-1, keepdims=True)
    d = (upstream - y * inner) / safe
    return np.where(small, upstream, d)


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def validate(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise DataError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise DataError("Adam eps must be > 0")


def adam_step(state: AdamState, params: dict) -> None:
    """Bias-corrected Adam update over named ParamTensors; zeroes grads afterwards.

    Blocks are visited in sorted-name order so the update sequence is
    reproducible independent of dict construction order.
    """
    state.validate()
    for name in sorted(params):
        if not np.all(np.isfinite(params[name].grad)):
            raise NumericError(f"non-finite gradient in parameter block {name!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in sorted(params):
        p = params[name]
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros_like(p.values)
            state.second_moment[name] = np.zeros_like(p.values)
        m = state.first_moment[name]
        v = state.second_moment[name]
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()


@dataclass
class GradCheckBlock:
    name: str
    max_rel_error: float
    worst_index: tuple
    n_checked: int


@dataclass
class GradCheckReport:
    blocks: list
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max((b.max_rel_error for b in self.blocks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(
    loss_fn,
    params: dict,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries_per_block: int | None = None,
    rng: np.random.Generator | None = None,
    denom_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare each block's .grad against central finite differences of loss_fn.

    loss_fn() must be a deterministic scalar function of the current
    parameter values; .grad must already hold the analytic gradient of
    that same scalar. Values are perturbed in place and restored.
    """
    blocks = []
    for name in sorted(params):
        p = params[name]
        flat_vals = p.values.reshape(-1)
        flat_grad = p.grad.reshape(-1)
        idx = np.arange(flat_vals.size)
        if max_entries_per_block is not None and flat_vals.size > max_entries_per_block:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(flat_vals.size, size=max_entries_per_block, replace=False)
        worst = 0.0
        worst_index = ()
        for i in idx:
            orig = flat_vals[i]
            flat_vals[i] = orig + h
            loss_plus = loss_fn()
            flat_vals[i] = orig - h
            loss_minus = loss_fn()
            flat_vals[i] = orig
            fd = (loss_plus - loss_minus) / (2.0 * h)
            denom = max(abs(fd), abs(flat_grad[i]), denom_floor)
            rel = abs(fd - flat_grad[i]) / denom
            if rel > worst:
                worst = rel
                worst_index = np.unravel_index(i, p.values.shape)
        blocks.append(
            GradCheckBlock(
                name=name, max_rel_error=worst, worst_index=worst_index, n_checked=len(idx)
            )
        )
    return GradCheckReport(blocks=blocks, tolerance=tolerance)
