"""Small dense networks in plain numpy.

Everything here is float64 and single-threaded so that a fixed seed gives
bit-identical parameters, losses and gradients.  Networks are treated as
values: ``backward_and_step`` returns a new :class:`DenseNet` and leaves its
argument untouched.

Layout conventions: a batch is an ``(N, d)`` array, one sample per row; a
layer weight is ``(fan_in, fan_out)`` so ``h @ W + b`` maps a row batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
TEACHER_MIN_MASS = 1e-9

# hidden widths per architecture; every hidden layer uses ReLU, the head is linear
ARCHITECTURES: dict[str, tuple[int, ...]] = {
    "A1": (64,),
    "A2": (128, 64),
    "A3": (256, 128),
}
ACTIVATIONS = ("relu", "linear")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}", field="activation")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ConfigError(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not match"
            )


@dataclass
class DenseNet:
    """Feed-forward classifier: a chain of affine layers with activations."""

    arch_id: str
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ConfigError(
                    f"layer widths do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def copy(self) -> "DenseNet":
        return DenseNet(
            self.arch_id,
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
        )

    def flat_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def with_flat_params(self, flat: np.ndarray) -> "DenseNet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise InputError(f"expected {self.n_params} parameters, got {flat.size}")
        layers, pos = [], 0
        for l in self.layers:
            w = flat[pos:pos + l.weight.size].reshape(l.weight.shape).copy()
            pos += l.weight.size
            b = flat[pos:pos + l.bias.size].copy()
            pos += l.bias.size
            layers.append(Layer(w, b, l.activation))
        return DenseNet(self.arch_id, layers)


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    kd: float
    total: float


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------

def _as_batch(net: DenseNet, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ConfigError(
            f"batch shape {np.shape(batch)} does not match input width {net.input_dim}"
        )
    return x


def _forward_trace(net: DenseNet, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Return layer inputs and pre-activations for backprop."""
    inputs, pre = [], []
    h = x
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.weight + layer.bias
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    inputs.append(h)
    return inputs, pre


def forward(net: DenseNet, batch) -> np.ndarray:
    """Logits for every row of ``batch``; shape ``(N, n_classes)``."""
    x = _as_batch(net, batch)
    inputs, _ = _forward_trace(net, x)
    return inputs[-1]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction.  Accepts a vector or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise InputError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input contains NaN or Inf")
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(probs, label: int) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise InputError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def normalize_teacher(teacher) -> tuple[np.ndarray, bool]:
    """Make teacher rows proper distributions.

    Rows whose mass is below ``TEACHER_MIN_MASS`` become uniform; other rows
    are divided by their sum.  Returns the normalized array and whether any
    row actually needed fixing.
    """
    t = np.asarray(teacher, dtype=np.float64)
    single = t.ndim == 1
    t2 = np.atleast_2d(t)
    if np.any(t2 < 0):
        raise InputError("teacher contains negative entries")
    mass = t2.sum(axis=1, keepdims=True)
    fixed = bool(np.any(np.abs(mass - 1.0) > 1e-12))
    empty = mass[:, 0] <= TEACHER_MIN_MASS
    out = np.where(mass > TEACHER_MIN_MASS, t2 / np.where(mass > 0, mass, 1.0), 0.0)
    out[empty] = 1.0 / t2.shape[1]
    return (out[0] if single else out), fixed


def _kd_rows(student_logits: np.ndarray, teacher: np.ndarray, temperature: float):
    """Per-row KL(teacher || softmax(student / T)) and the softened student."""
    log_s = _log_softmax(student_logits / temperature)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_t = np.where(teacher > 0, np.log(np.where(teacher > 0, teacher, 1.0)), 0.0)
    kl = np.sum(teacher * (log_t - log_s), axis=-1)
    return np.maximum(kl, 0.0), np.exp(log_s)


def kd_loss(student_logits, teacher, temperature: float = 1.0) -> float:
    """KL(teacher || softmax(student_logits / temperature))."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}", field="temperature")
    z = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if z.shape != t.shape:
        raise InputError(f"student {z.shape} and teacher {t.shape} lengths differ")
    t, _ = normalize_teacher(t)
    kl, _ = _kd_rows(z[None, :], t[None, :], temperature)
    return float(kl[0])


# ---------------------------------------------------------------------------
# objective and gradients
# ---------------------------------------------------------------------------

def _prepare_targets(x, labels, teachers, teacher_mask, n_classes):
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise InputError(f"{x.shape[0]} samples but {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    if teachers is None:
        return y, None, np.zeros(x.shape[0], dtype=bool)
    t = np.asarray(teachers, dtype=np.float64)
    if t.shape != (x.shape[0], n_classes):
        raise InputError(f"teacher targets {t.shape} not aligned with batch {(x.shape[0], n_classes)}")
    if teacher_mask is None:
        mask = np.ones(x.shape[0], dtype=bool)
    else:
        mask = np.asarray(teacher_mask, dtype=bool).reshape(-1)
        if mask.shape[0] != x.shape[0]:
            raise InputError("teacher mask not aligned with batch")
    t = t.copy()
    if mask.any():
        t[mask], fixed = normalize_teacher(t[mask])
        if fixed:
            log.debug("renormalized teacher targets that did not sum to 1")
    t[~mask] = 0.0
    return y, t, mask


def _loss_and_logit_grad(logits, y, t, mask, beta, temperature):
    n = logits.shape[0]
    # log-softmax is finite for finite logits, so no probability floor here;
    # a floor would flatten the loss while the gradient below stays nonzero
    log_p = _log_softmax(logits)
    p = np.exp(log_p)
    ce = float(np.mean(-log_p[np.arange(n), y]))
    dz = p.copy()
    dz[np.arange(n), y] -= 1.0
    dz /= n
    kd = 0.0
    m = int(mask.sum())
    if t is not None and m > 0:
        kl, s = _kd_rows(logits[mask], t[mask], temperature)
        kd = float(np.mean(kl))
        dz[mask] += beta * (s - t[mask]) / (temperature * m)
    return LossBreakdown(ce, kd, ce + beta * kd), dz


def local_objective(net, batch, labels, teacher_targets=None, beta: float = 1.0,
                    temperature: float = 1.0, teacher_mask=None) -> LossBreakdown:
    """Mean cross-entropy plus ``beta`` times mean distillation loss.

    ``teacher_targets`` is an ``(N, n)`` array aligned with the batch rows;
    rows with a false ``teacher_mask`` entry have no teacher and contribute
    nothing to the distillation term.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}", field="temperature")
    x = _as_batch(net, batch)
    y, t, mask = _prepare_targets(x, labels, teacher_targets, teacher_mask, net.n_classes)
    loss, _ = _loss_and_logit_grad(forward(net, x), y, t, mask, beta, temperature)
    return loss


def gradients(net, batch, labels, teacher_targets=None, beta: float = 1.0,
              temperature: float = 1.0, teacher_mask=None):
    """Analytic gradient of :func:`local_objective` by backpropagation.

    Returns ``(loss, grads)`` with ``grads`` a list of ``(dW, db)`` per layer.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}", field="temperature")
    x = _as_batch(net, batch)
    y, t, mask = _prepare_targets(x, labels, teacher_targets, teacher_mask, net.n_classes)
    inputs, pre = _forward_trace(net, x)
    loss, delta = _loss_and_logit_grad(inputs[-1], y, t, mask, beta, temperature)
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == "relu":
            delta = delta * (pre[i] > 0)
        grads[i] = (inputs[i].T @ delta, delta.sum(axis=0))
        if i:
            delta = delta @ layer.weight.T
    return loss, grads


def apply_gradients(net: DenseNet, grads, lr: float) -> DenseNet:
    """``W <- W - lr * grad`` for every parameter; returns a new net."""
    layers = [
        Layer(l.weight - lr * dw, l.bias - lr * db, l.activation)
        for l, (dw, db) in zip(net.layers, grads)
    ]
    return DenseNet(net.arch_id, layers)


def backward_and_step(net, batch, labels, teacher_targets=None, beta: float = 1.0,
                      temperature: float = 1.0, lr: float = 0.01, teacher_mask=None,
                      *, round_idx: int | None = None, client_id: int | None = None):
    """One plain SGD step on the local objective.  Returns ``(new_net, loss)``."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}", field="lr")
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grads = gradients(net, batch, labels, teacher_targets, beta, temperature, teacher_mask)
        if not np.isfinite(loss.total):
            raise NumericError("non-finite loss", round_idx, client_id)
        stepped = apply_gradients(net, grads, lr)
    if not np.all(np.isfinite(stepped.flat_params())):
        raise NumericError("parameters overflowed during SGD step", round_idx, client_id)
    return stepped, loss


def finite_difference_gradient(objective: Callable[[DenseNet], float], net: DenseNet,
                               step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``objective`` w.r.t. flattened parameters."""
    theta = net.flat_params()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        up = objective(net.with_flat_params(theta))
        theta[i] = orig - step
        down = objective(net.with_flat_params(theta))
        theta[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad


def flatten_grads(grads: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def arch_for_client(index: int, heterogeneous: bool) -> str:
    """Client ``i`` gets A1/A2/A3 by ``i mod 3`` when models are heterogeneous."""
    if not heterogeneous:
        return "A1"
    return ("A1", "A2", "A3")[index % 3]


def make_model(arch_id: str, input_dim: int, n_classes: int, init_seed: int) -> DenseNet:
    """He-initialized ReLU MLP with zero biases; deterministic in ``init_seed``."""
    if arch_id not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch_id!r}", field="arch_id")
    if input_dim < 1 or n_classes < 1:
        raise ConfigError("input_dim and n_classes must be positive")
    rng = np.random.default_rng(init_seed)
    widths = (input_dim, *ARCHITECTURES[arch_id], n_classes)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        last = i == len(widths) - 2
        scale = np.sqrt((1.0 if last else 2.0) / fan_in)
        layers.append(Layer(
            rng.standard_normal((fan_in, fan_out)) * scale,
            np.zeros(fan_out),
            "linear" if last else "relu",
        ))
    return DenseNet(arch_id, layers)
