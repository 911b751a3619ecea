"""Noise-penalised top-K expert selection and lifetime usage bookkeeping."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE

ADAPTIVE = "adaptive"
FIXED = "fixed"
UNIFORM = "uniform"
NOISE_MODES = (ADAPTIVE, FIXED, UNIFORM)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    epsilon: float = 0.0
    mode: str = ADAPTIVE

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.mode not in NOISE_MODES:
            raise ConfigurationError(f"unknown noise mode {self.mode!r}")


def adaptive_noise(scores, freq, cfg: NoiseConfig, train=True, rng=None):
    """Penalty subtracted from expert scores before top-K selection.

    Broadcasts over leading axes: ``scores`` is ``(..., N_p)`` and ``freq`` is
    ``(N_p,)`` or broadcastable to ``scores``. Only experts whose frequency is at
    least the mean frequency of their head are penalised (``uniform`` mode
    perturbs all of them). Eval mode always returns zeros.
    """
    scores = np.asarray(scores, dtype=DTYPE)
    if not train or cfg.epsilon == 0.0:
        return np.zeros_like(scores)
    freq = np.broadcast_to(np.asarray(freq, dtype=DTYPE), scores.shape)
    gated = freq >= freq.mean(axis=-1, keepdims=True)
    if cfg.mode == ADAPTIVE:
        spread = scores.max(axis=-1, keepdims=True) - scores.min(axis=-1, keepdims=True)
        return np.where(gated, cfg.epsilon * spread, 0.0)
    if cfg.mode == FIXED:
        return np.where(gated, cfg.epsilon, 0.0)
    if rng is None:
        raise ValueError("uniform noise needs an rng")
    return rng.uniform(-cfg.epsilon, cfg.epsilon, size=scores.shape)


def select_experts(scores, noise, k):
    """Indices of the ``k`` largest ``scores - noise``, ascending.

    Ties go to the lower index. Works on ``(..., N_p)`` arrays and returns
    ``(..., k)`` index arrays.
    """
    scores = np.asarray(scores, dtype=DTYPE)
    n_p = scores.shape[-1]
    if k > n_p or k < 1:
        raise ConfigurationError(f"cannot select {k} of {n_p} experts")
    adjusted = scores - np.asarray(noise, dtype=DTYPE)
    # stable sort on the negated values keeps lower indices first among ties
    order = np.argsort(-adjusted, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def selection_mask(selected, n_p):
    selected = np.asarray(selected)
    mask = np.zeros(selected.shape[:-1] + (n_p,), dtype=bool)
    np.put_along_axis(mask, selected, True, axis=-1)
    return mask


def update_usage(block, decisions):
    """Fold a stream of routing decisions (one per sample and head) into ``block``.

    Decisions may be ``RoutingDecision`` objects or boolean selection masks of
    shape ``(B, heads, N_p)``.
    """
    for dec in decisions:
        if hasattr(dec, "selected"):
            if not 0 <= dec.head < block.n_heads:
                raise IndexError(f"head {dec.head} out of range for block with {block.n_heads} heads")
            block.selected_count[dec.head, np.asarray(dec.selected, dtype=np.int64)] += 1
            block.instance_count[dec.head] += 1
        else:
            mask = np.asarray(dec, dtype=bool)
            if mask.shape[1:] != block.selected_count.shape:
                raise IndexError(f"mask shape {mask.shape} does not match usage {block.selected_count.shape}")
            block.selected_count += mask.sum(axis=0)
            block.instance_count += mask.shape[0]
    return block


def usage_entropy(freq):
    freq = np.asarray(freq, dtype=DTYPE)
    total = freq.sum()
    if total <= 0:
        raise ValueError("entropy undefined for an all-zero frequency vector")
    p = freq / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def usage_rows(blocks):
    """``(layer, head, expert, frequency)`` for every expert of every block."""
    for layer, block in enumerate(blocks):
        freq = block.frequency
        for head in range(freq.shape[0]):
            for expert in range(freq.shape[1]):
                yield layer, head, expert, float(freq[head, expert])


def write_usage_csv(path, blocks):
    """One row per (layer, head, expert) with its lifetime selection frequency."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "head", "expert", "frequency"])
        for layer, head, expert, f in usage_rows(blocks):
            writer.writerow([layer, head, expert, repr(f)])
