"""Dense kernels, seeded RNG, parameter carriers and a finite-difference checker.

All arrays are float64 numpy arrays. Gradients are propagated by hand-written
backward functions living next to each forward; this module only holds the
primitives they share.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox); same seed and call order give the same stream everywhere."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def check_finite(x, what="value"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite entries in {what}")
    return x


@dataclass
class Param:
    """A trainable array with its gradient buffer."""

    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    requires_grad: bool = True
    name: str = ""

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


def matmul(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(a, b, dout):
    """Gradients of ``a @ b`` with respect to both arguments."""
    return dout @ b.T, a.T @ dout


def softmax_masked(logits, mask=None, axis=-1):
    """Softmax over the unmasked entries of ``axis``; masked entries are exactly zero.

    ``mask`` broadcasts against ``logits``; ``True`` marks an entry that takes part.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    if mask is None:
        shifted = logits - logits.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not np.all(mask.any(axis=axis)):
        raise InvalidMaskError("every softmax row needs at least one unmasked entry")
    masked = np.where(mask, logits, -np.inf)
    shifted = masked - masked.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs, dprobs, axis=-1):
    """Vector-Jacobian product of softmax; masked entries (prob 0) receive zero."""
    return probs * (dprobs - (probs * dprobs).sum(axis=axis, keepdims=True))


def log_softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def gelu_grad2(x):
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return pdf * (2.0 - x * x)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu_tanh(x):
    """Tanh approximation of GELU; several times cheaper than the erf form."""
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t)


def gelu_tanh_grad(x, t=None):
    """Derivative of ``gelu_tanh``; pass the forward's tanh value ``t`` to skip recomputing it."""
    if t is None:
        t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def layernorm(x, gamma, beta, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def layernorm_backward(dy, gamma, cache):
    xhat, inv = cache
    d = xhat.shape[-1]
    dxhat = dy * gamma
    dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


class OpCounter:
    """Tallies multiply-accumulates per named computation."""

    def __init__(self):
        self.macs = {}

    def add(self, key, n):
        self.macs[key] = self.macs.get(key, 0) + int(n)

    def __getitem__(self, key):
        return self.macs.get(key, 0)

    def reset(self):
        self.macs.clear()


@dataclass
class GradCheckReport:
    max_rel_error: dict
    tol: float

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self):
        return self.worst < self.tol


def finite_diff_check(loss_fn: Callable[[], float], params: Iterable[Param],
                      step=1e-5, tol=1e-4) -> GradCheckReport:
    """Compare analytic gradients with central differences, entry by entry.

    ``loss_fn()`` evaluates the loss at the current parameter values and writes
    the analytic gradient into every ``Param.grad``. Relative error per entry is
    ``|a - n| / max(1, |a|, |n|)``; the report keeps the worst entry per parameter.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-6, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    base = loss_fn()
    if not np.isfinite(base):
        raise NumericError("loss is not finite")
    analytic = [p.grad.copy() for p in params]
    report = {}
    for k, (p, g) in enumerate(zip(params, analytic)):
        flat = p.value.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_fn()
            flat[i] = orig - step
            f_minus = loss_fn()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("loss is not finite under perturbation")
            num = (f_plus - f_minus) / (2.0 * step)
            ana = g.reshape(-1)[i]
            rel = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, rel)
        report[p.name or f"param{k}"] = worst
    for p, g in zip(params, analytic):
        p.grad = g
    return GradCheckReport(report, tol)


class Adam:
    """Adam over a dict of named arrays; parameters are updated in place."""

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 lr_scale=None):
        self.params = params
        self.lr_scale = lr_scale or {}
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            p = self.params[k]
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p -= lr * self.lr_scale.get(k, 1.0) * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def cosine_lr(base, step, total, floor=0.0):
    if total <= 1:
        return base
    return floor + 0.5 * (base - floor) * (1.0 + np.cos(np.pi * min(step, total) / total))
