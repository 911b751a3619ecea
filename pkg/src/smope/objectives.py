"""Router loss, prefix-key prototypes and the combined training objective.

Each loss returns ``(value, grad)`` where the gradient is taken with the
selected index sets held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import log_softmax, softmax_masked


@dataclass(frozen=True)
class LossWeights:
    router: float = 0.0
    proto: float = 0.0

    def __post_init__(self):
        for v in (self.router, self.proto):
            if not np.isfinite(v) or v < 0:
                raise ValueError("loss weights must be finite and non-negative")


@dataclass
class PrototypeSet:
    """Per prompted layer, an ``(n_kept, d)`` array of retained old prefix keys."""

    keys: list = field(default_factory=list)

    def __len__(self):
        return sum(len(k) for k in self.keys)


def router_loss(scores, mask):
    """Negative softmax mass (over all experts) sitting on the selected experts.

    ``scores``/``mask`` are ``(..., N_p)``; the loss is the mean over all leading
    positions (sample, layer, head). Returns ``(loss, dscores)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    p = softmax_masked(scores)
    mass = (p * mask).sum(axis=-1)
    count = mass.size
    loss = -float(mass.mean())
    # d(mass)/ds_j = p_j (1[j in S] - mass)
    dscores = -(p * (mask - mass[..., None])) / count
    return loss, dscores


def build_prototype_set(old_keys, freq):
    """Keep each layer's old keys whose head-averaged frequency is at least the layer mean.

    ``old_keys``: per layer ``(N_p, d)``; ``freq``: per layer ``(heads, N_p)`` or ``(N_p,)``.
    """
    kept = []
    for keys, f in zip(old_keys, freq):
        f = np.asarray(f, dtype=np.float64)
        if f.ndim == 2:
            f = f.mean(axis=0)
        kept.append(np.array(keys)[f >= f.mean()])
    return PrototypeSet(kept)


def prototype_loss(protos: PrototypeSet, keys, k):
    """Mean negative softmax mass each prototype puts on its own top-``k`` current keys.

    ``keys`` is the list of current per-layer prefix keys. Returns
    ``(loss, [dkeys per layer])``.
    """
    grads = [np.zeros_like(kk) for kk in keys]
    total = sum(len(p) for p in protos.keys)
    if total == 0:
        return 0.0, grads
    loss = 0.0
    for layer, (p, kk) in enumerate(zip(protos.keys, keys)):
        if len(p) == 0:
            continue
        logits = p @ kk.T
        probs = softmax_masked(logits)
        order = np.argsort(-logits, axis=-1, kind="stable")[:, :k]
        mask = np.zeros_like(logits, dtype=bool)
        np.put_along_axis(mask, order, True, axis=-1)
        mass = (probs * mask).sum(axis=-1)
        loss -= mass.sum()
        dlogits = -(probs * (mask - mass[:, None])) / total
        grads[layer] = dlogits.T @ p
    return loss / total, grads


def cross_entropy(logits, labels, allowed=None):
    """Mean cross-entropy; ``allowed`` restricts the softmax to a subset of columns.

    Returns ``(loss, dlogits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    b = logits.shape[0]
    if allowed is not None:
        mask = np.zeros(logits.shape[1], dtype=bool)
        mask[allowed] = True
        masked = np.where(mask, logits, -np.inf)
    else:
        masked = logits
    logp = log_softmax(masked)
    loss = -float(logp[np.arange(b), labels].mean())
    d = np.exp(logp)
    d[np.arange(b), labels] -= 1.0
    return loss, d / b


def total_loss(ce, router, proto, weights: LossWeights):
    return ce + weights.router * router + weights.proto * proto
