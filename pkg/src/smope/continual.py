"""Class-incremental task streams and the per-task training procedure.

``train_task`` only ever sees the current task's data; everything that must
survive across tasks (prompts, head, class Gaussians, usage counts, the
previous prefix keys) lives in ``LearnerState``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import objectives as obj
from .model import (DENSE, Backbone, LearnerState, ModelConfig, classify, classify_backward, encode,
                    encode_backward, predict)
from .numerics import Adam, NumericError, cosine_lr, make_rng
from .prefix_moe import TOKEN
from .routing import NoiseConfig, update_usage, usage_entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StreamSpec:
    n_tasks: int = 5
    classes_per_task: int = 2
    clusters_per_class: int = 2
    tokens: int = 16
    raw_dim: int = 8
    train_per_class: int = 200
    val_per_class: int = 40
    test_per_class: int = 100
    separation: float = 1.0
    noise: float = 0.5
    task_shift: float = 0.5

    def validate(self):
        for name in ("n_tasks", "classes_per_task", "clusters_per_class", "tokens", "raw_dim",
                     "train_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"stream spec field {name} must be positive")
        if self.val_per_class < 0 or self.noise < 0 or self.separation < 0 or self.task_shift < 0:
            raise ValueError("stream spec scales and split sizes must be non-negative")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray


@dataclass
class Task:
    index: int
    classes: list
    train: Split
    val: Split
    test: Split


@dataclass
class TaskStream:
    spec: StreamSpec
    seed: int
    tasks: list

    def __len__(self):
        return len(self.tasks)


def _class_sampler(rng, spec: StreamSpec, shift):
    means = rng.normal(0.0, spec.separation, (spec.clusters_per_class, spec.tokens, spec.raw_dim)) + shift

    def draw(n):
        comp = rng.integers(0, spec.clusters_per_class, n)
        return means[comp] + rng.normal(0.0, spec.noise, (n, spec.tokens, spec.raw_dim))

    return draw


def _split(parts):
    xs, ys = zip(*parts)
    return Split(np.concatenate(xs), np.concatenate(ys).astype(np.int64))


def generate_task_stream(spec: StreamSpec, seed) -> TaskStream:
    """Disjoint-label tasks of Gaussian-mixture token grids.

    Each class draws ``clusters_per_class`` mean grids; every task also adds a
    shared per-task offset to all of its tokens so tasks differ in their average
    token.
    """
    spec.validate()
    rng = make_rng(seed)
    tasks = []
    for t in range(spec.n_tasks):
        shift = rng.normal(0.0, spec.task_shift, spec.raw_dim)
        classes = list(range(t * spec.classes_per_task, (t + 1) * spec.classes_per_task))
        parts = {"train": [], "val": [], "test": []}
        for c in classes:
            draw = _class_sampler(rng, spec, shift)
            for split, n in (("train", spec.train_per_class), ("val", spec.val_per_class),
                             ("test", spec.test_per_class)):
                parts[split].append((draw(n), np.full(n, c)))
        splits = {}
        for name, p in parts.items():
            s = _split(p)
            order = rng.permutation(len(s.y))
            splits[name] = Split(s.x[order], s.y[order])
        tasks.append(Task(t, classes, splits["train"], splits["val"], splits["test"]))
    return TaskStream(spec, seed, tasks)


# ---------------------------------------------------------------------------
# backbone pre-training on a held-out problem
# ---------------------------------------------------------------------------


def pretrain_backbone(cfg: ModelConfig, seed, n_classes=10, per_class=100, steps=300, lr=2e-3,
                      batch=64, spec: StreamSpec = None) -> Backbone:
    """Train a fresh backbone on classes disjoint from any continual stream, then freeze it."""
    spec = spec or StreamSpec(tokens=cfg.tokens - 1, raw_dim=cfg.raw_dim)
    rng = make_rng(10_000_019 + seed)
    xs, ys = [], []
    for c in range(n_classes):
        shift = rng.normal(0.0, spec.task_shift, spec.raw_dim)
        xs.append(_class_sampler(rng, spec, shift)(per_class))
        ys.append(np.full(per_class, c))
    x, y = np.concatenate(xs), np.concatenate(ys)
    bb = Backbone.init(cfg, rng)
    probe = LearnerState(cfg.with_(prompt_layers=0), bb, [], None)
    w_head = rng.normal(0.0, 0.01, (n_classes, cfg.embed_dim))
    params = dict(bb.params)
    params["head.w"] = w_head
    params["head.b"] = np.zeros(n_classes)
    opt = Adam(params, lr=lr)
    for step in range(steps):
        idx = rng.integers(0, len(y), batch)
        z, _, cache = encode(probe, x[idx], use_prompts=False, need_cache=True)
        logits = z @ params["head.w"].T + params["head.b"]
        _, dl = obj.cross_entropy(logits, y[idx])
        grads = encode_backward(probe, cache, dl @ params["head.w"], need_weight_grads=True)
        grads["head.w"] = dl.T @ z
        grads["head.b"] = dl.sum(axis=0)
        opt.step(grads, lr=cosine_lr(lr, step, steps))
    bb.freeze()
    return bb


@lru_cache(maxsize=8)
def cached_backbone(cfg: ModelConfig, seed, steps=300, spec: StreamSpec = None):
    # the prompt settings do not touch the backbone, so strip them from the cache key
    cfg = cfg.with_(prompt_layers=0, score_mode="proxy", select_k=1, prompt_length=max(cfg.prompt_length, 1))
    return pretrain_backbone(cfg, seed, steps=steps, spec=spec)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HyperParams:
    epochs: int = 5
    batch: int = 32
    lr: float = 1e-3
    head_lr: float = 1e-2
    epsilon: float = 0.0
    noise_mode: str = "adaptive"
    alpha_router: float = 0.0
    alpha_proto: float = 0.0
    dense_warmup: bool = False
    tap: bool = False
    tap_samples: int = 64
    tap_lr: float = 1e-3
    mask_old_logits: bool = False
    ridge: float = 1e-4
    pretrain_steps: int = 300

    def __post_init__(self):
        for name in ("epochs", "batch", "tap_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "head_lr", "tap_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.pretrain_steps < 0 or self.ridge < 0:
            raise ValueError("pretrain_steps and ridge must be non-negative")
        # both constructors validate their fields
        NoiseConfig(self.epsilon, self.noise_mode)
        obj.LossWeights(self.alpha_router, self.alpha_proto)

    @property
    def noise(self):
        return NoiseConfig(self.epsilon, self.noise_mode)

    @property
    def weights(self):
        return obj.LossWeights(self.alpha_router, self.alpha_proto)


@dataclass
class TaskLog:
    losses: list = field(default_factory=list)
    dense_losses: list = field(default_factory=list)
    tap_losses: list = field(default_factory=list)


def training_loss(state, x, y, hyper: HyperParams, k=None, allowed=None, protos=None, rng=None, train=True,
                  masks=None):
    """Total objective (CE + router + prototype) and its gradients w.r.t. prompts and head.

    ``masks`` pins the routing per prompt layer so the loss is a smooth function of the
    parameters (used by gradient checks). Returns ``(loss, grads)``.
    """
    weights = hyper.weights
    z, routing, cache = encode(state, x, train=train, noise_cfg=hyper.noise, rng=rng, k=k, masks=masks,
                               need_cache=True)
    logits = classify(state.head, z)
    ce, dlogits = obj.cross_entropy(logits, y, allowed)
    r_loss, dscores = 0.0, {}
    if weights.router > 0 and routing:
        scores = np.stack([r.scores for r in routing])
        mask = np.stack([r.mask for r in routing])
        r_loss, ds = obj.router_loss(scores, mask)
        dscores = {r.layer: weights.router * ds[j] for j, r in enumerate(routing)}
    p_loss, dkeys = 0.0, None
    if weights.proto > 0 and protos is not None and len(protos):
        p_loss, dkeys = obj.prototype_loss(protos, [b.keys for b in state.prompts],
                                           state.cfg.select_k if state.cfg.select_k != DENSE else state.cfg.prompt_length)
    loss = obj.total_loss(ce, r_loss, p_loss, weights)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss (ce={ce}, router={r_loss}, proto={p_loss})")
    dz, dw, db = classify_backward(state.head, z, dlogits)
    grads = encode_backward(state, cache, dz, dscores=dscores)
    if dkeys is not None:
        for i, g in enumerate(dkeys):
            grads[f"prompts.{i}.keys"] = grads.get(f"prompts.{i}.keys", 0.0) + weights.proto * g
    grads["head.weight"] = dw
    grads["head.bias"] = db
    return loss, grads


def _train_step(state, x, y, opt, lr, hyper: HyperParams, k, allowed, protos, rng, train=True):
    loss, grads = training_loss(state, x, y, hyper, k, allowed, protos, rng, train)
    opt.step(grads, lr=lr)
    return loss


def _optimizer(state, hyper):
    params = state.prompt_params()
    params["head.weight"] = state.head.weight
    params["head.bias"] = state.head.bias
    scale = hyper.head_lr / hyper.lr
    return Adam(params, lr=hyper.lr, lr_scale={"head.weight": scale, "head.bias": scale})


def _epochs(state, task, hyper, rng, n_epochs, k, allowed, protos, opt, losses, base_lr):
    n = len(task.train.y)
    steps_per_epoch = max(1, int(np.ceil(n / hyper.batch)))
    total = n_epochs * steps_per_epoch
    step = 0
    for _ in range(n_epochs):
        order = rng.permutation(n)
        acc = 0.0
        for s in range(0, n, hyper.batch):
            idx = order[s:s + hyper.batch]
            lr = cosine_lr(base_lr, step, total)
            acc += _train_step(state, task.train.x[idx], task.train.y[idx], opt, lr, hyper, k, allowed,
                               protos, rng) * len(idx)
            step += 1
        losses.append(acc / n)


def train_task(state: LearnerState, task: Task, hyper: HyperParams, rng, tlog: TaskLog = None) -> LearnerState:
    """Learn one task: snapshot, optional dense warm-up, sparse epochs, Gaussians, TAP, usage update."""
    tlog = tlog if tlog is not None else TaskLog()
    if task.index != state.task:
        raise ValueError(f"expected task {state.task}, got {task.index}")
    protos = None
    if state.task > 0:
        state.old_keys = [b.keys.copy() for b in state.prompts]
        protos = obj.build_prototype_set(state.old_keys, [b.frequency for b in state.prompts])
    new = [c for c in task.classes if c not in state.seen_classes]
    if sorted(new) != list(range(state.head.n_classes, state.head.n_classes + len(new))):
        raise ValueError("class ids must extend the label space contiguously")
    state.head.grow(len(new))
    state.seen_classes.extend(new)
    allowed = list(task.classes) if hyper.mask_old_logits else None

    opt = _optimizer(state, hyper)
    if state.task == 0 and hyper.dense_warmup and hyper.epochs // 2 > 0:
        dense_hyper = HyperParams(**{**asdict(hyper), "alpha_router": 0.0, "alpha_proto": 0.0, "epsilon": 0.0})
        _epochs(state, task, dense_hyper, rng, hyper.epochs // 2, DENSE, allowed, None, opt,
                tlog.dense_losses, hyper.lr)
    _epochs(state, task, hyper, rng, hyper.epochs, None, allowed, protos, opt, tlog.losses, hyper.lr)

    reps = {c: [] for c in task.classes}
    z = representations(state, task.train.x)
    for c in task.classes:
        reps[c] = z[task.train.y == c]
    state.class_stats.update(estimate_class_gaussians(reps, ridge=hyper.ridge))

    if hyper.tap:
        tap_refine(state.head, {c: state.class_stats[c] for c in state.seen_classes}, hyper.epochs,
                   hyper.tap_samples, rng, lr=hyper.tap_lr, batch=hyper.batch, losses=tlog.tap_losses)

    for s in range(0, len(task.train.y), 256):
        _, routing, _ = encode(state, task.train.x[s:s + 256], train=False)
        for r in routing:
            update_usage(state.prompts[r.layer], [r.mask])
    state.task += 1
    return state


def representations(state, x, batch=256):
    out = []
    for s in range(0, len(x), batch):
        z, _, _ = encode(state, x[s:s + batch])
        out.append(z)
    return np.concatenate(out)


def estimate_class_gaussians(reps, ridge=1e-4, absolute=None):
    """Population mean and covariance per class, plus a ridge on the diagonal.

    The ridge is ``ridge * trace(cov) / d`` unless ``absolute`` fixes it.
    """
    stats = {}
    for c, z in reps.items():
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or len(z) < 2:
            raise ValueError(f"class {c} needs at least two representations")
        mu = z.mean(axis=0)
        zc = z - mu
        cov = zc.T @ zc / len(z)
        cov = 0.5 * (cov + cov.T)
        d = cov.shape[0]
        delta = absolute if absolute is not None else max(ridge * np.trace(cov) / d, 1e-10)
        stats[c] = (mu, cov + delta * np.eye(d))
    return stats


def _cholesky(cov):
    jitter = 0.0
    scale = max(np.trace(cov) / cov.shape[0], 1e-12)
    for _ in range(8):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            jitter = scale * 1e-6 if jitter == 0.0 else jitter * 10
            warnings.warn(f"covariance not positive definite; escalating ridge to {jitter:.3g}")
    raise NumericError("covariance could not be factorised")


def sample_pseudo_representations(stats, m, rng):
    """``m`` draws from every class Gaussian; returns ``(z, labels)`` in class order."""
    zs, ys = [], []
    for c in sorted(stats):
        mu, cov = stats[c]
        chol = _cholesky(cov)
        zs.append(mu + rng.normal(size=(m, len(mu))) @ chol.T)
        ys.append(np.full(m, c))
    return np.concatenate(zs), np.concatenate(ys)


def tap_refine(head, stats, epochs, samples_per_class, rng, lr=1e-3, batch=32, losses=None):
    """Refit the classifier on pseudo-representations drawn equally from every seen class."""
    params = {"w": head.weight, "b": head.bias}
    opt = Adam(params, lr=lr)
    total = epochs * int(np.ceil(samples_per_class * len(stats) / batch))
    step = 0
    for _ in range(epochs):
        z, y = sample_pseudo_representations(stats, samples_per_class, rng)
        order = rng.permutation(len(y))
        acc = 0.0
        for s in range(0, len(y), batch):
            idx = order[s:s + batch]
            logits = classify(head, z[idx])
            loss, dl = obj.cross_entropy(logits, y[idx])
            _, dw, db = classify_backward(head, z[idx], dl)
            opt.step({"w": dw, "b": db}, lr=cosine_lr(lr, step, total))
            step += 1
            acc += loss * len(idx)
        if losses is not None:
            losses.append(acc / len(y))
    return head


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(state: LearnerState, stream: TaskStream, upto):
    """Accuracy on each task ``0..upto`` test split, predicting over all seen classes."""
    row = []
    for task in stream.tasks[:upto + 1]:
        pred = predict(state, task.test.x)
        row.append(float(np.mean(pred == task.test.y)))
    return row


def faa_caa(acc):
    """Final and cumulative average accuracy from a lower-triangular matrix.

    ``acc[t][i]`` is the accuracy on task ``i`` after learning task ``t``
    (``i <= t``); entries above the diagonal are ignored.
    """
    averages = [float(np.mean([acc[t][i] for i in range(t + 1)])) for t in range(len(acc))]
    return averages[-1], float(np.mean(averages))


def mean_usage_entropy(state):
    ents = [usage_entropy(f) for blk in state.prompts for f in blk.frequency if f.sum() > 0]
    return float(np.mean(ents)) if ents else float("nan")


def run_stream(model_cfg: ModelConfig, stream: TaskStream, hyper: HyperParams, seed, on_task=None):
    """Train through the whole stream; returns ``(state, accuracy rows, per-task logs)``."""
    bb = cached_backbone(model_cfg, seed, hyper.pretrain_steps, stream.spec)
    rng = make_rng(seed)
    state = LearnerState.init(model_cfg, bb, rng)
    rows, logs = [], []
    for task in stream.tasks:
        tlog = TaskLog()
        train_task(state, task, hyper, rng, tlog)
        rows.append(evaluate(state, stream, task.index))
        logs.append(tlog)
        if on_task is not None:
            on_task(state, task, rows[-1], tlog)
    return state, rows, logs


# Cumulative ablation rows, each adding one component to the row above it.
# Entries are (name, model-config overrides, hyper-parameter overrides).
ABLATION_LADDER = (
    ("One Prompt", {"score_mode": TOKEN, "select_k": DENSE}, {}),
    ("+ Prompt Score Aggregation", {"select_k": DENSE}, {}),
    ("+ Sparse Expert Selection", {}, {}),
    ("+ Adaptive Noise", {}, {"epsilon": None}),
    ("+ Task-Adaptive Prediction", {}, {"epsilon": None, "tap": True}),
    ("+ Initial Dense Training", {}, {"epsilon": None, "tap": True, "dense_warmup": True}),
    ("+ Router Loss", {}, {"epsilon": None, "tap": True, "dense_warmup": True, "alpha_router": None}),
    ("+ Prototype Loss", {}, {"epsilon": None, "tap": True, "dense_warmup": True, "alpha_router": None,
                              "alpha_proto": None}),
)


FULL_METHOD = {"epsilon": 0.4, "tap": True, "dense_warmup": True, "alpha_router": 0.1, "alpha_proto": 1e-3}


def full_method(**overrides) -> HyperParams:
    """Hyper-parameters of the complete method at desk scale."""
    return HyperParams(**{**FULL_METHOD, **overrides})


def ablation_stage(name, model_cfg: ModelConfig, hyper: HyperParams):
    """Model config and hyper-parameters for one ladder row.

    ``hyper`` carries the full method's settings; rows that have not yet added a
    component get it switched off. ``None`` overrides keep the value from ``hyper``.
    """
    rows = {n: (m, h) for n, m, h in ABLATION_LADDER}
    if name not in rows:
        raise KeyError(f"unknown ablation row {name!r}")
    mk, hk = rows[name]
    off = {"epsilon": 0.0, "tap": False, "dense_warmup": False, "alpha_router": 0.0, "alpha_proto": 0.0}
    fields = {**asdict(hyper), **off}
    for key, val in hk.items():
        fields[key] = getattr(hyper, key) if val is None else val
    return model_cfg.with_(**mk), HyperParams(**fields)
