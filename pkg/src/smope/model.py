"""Compact pre-norm transformer encoder hosting prompt-expert attention, plus the classifier head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import prefix_moe as pm
from .numerics import (_GELU_C, DTYPE, DimensionError, NumericError, gelu_tanh_grad,
                       layernorm, layernorm_backward)
from .prefix_moe import PROXY, TOKEN, AttentionWeights, PromptBlock, RoutingDecision
from .routing import NoiseConfig, adaptive_noise, select_experts, selection_mask

DENSE = -1


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    heads: int = 4
    embed_dim: int = 64
    tokens: int = 17
    raw_dim: int = 8
    prompt_layers: int = 2
    prompt_length: int = 8
    select_k: int = 2
    mlp_ratio: float = 4.0
    score_mode: str = PROXY

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if not 0 <= self.prompt_layers <= self.depth:
            raise ValueError("prompt_layers must lie in [0, depth]")
        if self.select_k != DENSE and not 1 <= self.select_k <= self.prompt_length:
            raise ValueError("select_k must be DENSE or in [1, prompt_length]")
        if self.score_mode not in (PROXY, TOKEN):
            raise ValueError(f"unknown score_mode {self.score_mode!r}")
        if self.score_mode == TOKEN and self.select_k != DENSE:
            raise ValueError("per-token prompt scores only support dense prompting")

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    def with_(self, **kw):
        return ModelConfig(**{**asdict(self), **kw})


class Backbone:
    """Frozen transformer weights held in a flat name -> array dict."""

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params
        self.frozen = False

    @classmethod
    def init(cls, cfg: ModelConfig, rng):
        d, hdim = cfg.embed_dim, cfg.hidden_dim
        p = {
            "embed.w": rng.normal(0.0, 1.0 / np.sqrt(cfg.raw_dim), (cfg.raw_dim, d)),
            "embed.b": np.zeros(d),
            "embed.pos": rng.normal(0.0, 0.1, (cfg.tokens - 1, d)),
            "cls": rng.normal(0.0, 0.5, d),
            "norm.g": np.ones(d),
            "norm.b": np.zeros(d),
        }
        for i in range(cfg.depth):
            p.update({
                f"blocks.{i}.ln1.g": np.ones(d), f"blocks.{i}.ln1.b": np.zeros(d),
                f"blocks.{i}.w_q": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
                f"blocks.{i}.w_k": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
                f"blocks.{i}.w_v": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
                f"blocks.{i}.w_o": rng.normal(0.0, 1.0 / np.sqrt(d) / np.sqrt(2 * cfg.depth), (d, d)),
                f"blocks.{i}.b_o": np.zeros(d),
                f"blocks.{i}.ln2.g": np.ones(d), f"blocks.{i}.ln2.b": np.zeros(d),
                f"blocks.{i}.w1": rng.normal(0.0, 1.0 / np.sqrt(d), (d, hdim)),
                f"blocks.{i}.b1": np.zeros(hdim),
                f"blocks.{i}.w2": rng.normal(0.0, 1.0 / np.sqrt(hdim) / np.sqrt(2 * cfg.depth), (hdim, d)),
                f"blocks.{i}.b2": np.zeros(d),
            })
        return cls(cfg, p)

    def attention(self, i) -> AttentionWeights:
        p = self.params
        return AttentionWeights(p[f"blocks.{i}.w_q"], p[f"blocks.{i}.w_k"], p[f"blocks.{i}.w_v"],
                                p[f"blocks.{i}.w_o"], p[f"blocks.{i}.b_o"], self.cfg.heads)

    def freeze(self):
        for v in self.params.values():
            v.setflags(write=False)
        self.frozen = True

    def snapshot(self):
        return {k: v.copy() for k, v in self.params.items()}


@dataclass
class ClassifierHead:
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def empty(cls, d):
        return cls(np.zeros((0, d)), np.zeros(0))

    @property
    def n_classes(self):
        return self.weight.shape[0]

    def grow(self, n_new, rng=None, scale=0.0):
        d = self.weight.shape[1]
        rows = np.zeros((n_new, d)) if rng is None or scale == 0 else rng.normal(0.0, scale, (n_new, d))
        self.weight = np.concatenate([self.weight, rows])
        self.bias = np.concatenate([self.bias, np.zeros(n_new)])

    def copy(self):
        return ClassifierHead(self.weight.copy(), self.bias.copy())


def classify(head: ClassifierHead, z):
    if head.n_classes < 1:
        raise DimensionError("classifier head has no classes yet")
    return z @ head.weight.T + head.bias


def classify_backward(head: ClassifierHead, z, dlogits):
    """Returns ``(dz, dweight, dbias)``."""
    return dlogits @ head.weight, dlogits.T @ z, dlogits.sum(axis=0)


@dataclass
class LayerRouting:
    """Routing of one prompted layer for a batch: arrays of shape ``(B, heads, N_p)``."""

    layer: int
    scores: np.ndarray
    noise: np.ndarray
    mask: np.ndarray

    def decisions(self):
        for b in range(self.scores.shape[0]):
            for h in range(self.scores.shape[1]):
                yield RoutingDecision(self.layer, h, self.scores[b, h], self.noise[b, h],
                                      np.flatnonzero(self.mask[b, h]))


@dataclass
class LearnerState:
    cfg: ModelConfig
    backbone: Backbone
    prompts: list
    head: ClassifierHead
    class_stats: dict = field(default_factory=dict)
    old_keys: list = None
    seen_classes: list = field(default_factory=list)
    task: int = 0

    @classmethod
    def init(cls, cfg: ModelConfig, backbone: Backbone, rng):
        prompts = [pm.init_prompt_block(rng, cfg.prompt_length, cfg.embed_dim, cfg.heads)
                   for _ in range(cfg.prompt_layers)]
        return cls(cfg, backbone, prompts, ClassifierHead.empty(cfg.embed_dim))

    def prompt_params(self):
        out = {}
        for i, blk in enumerate(self.prompts):
            out[f"prompts.{i}.keys"] = blk.keys
            out[f"prompts.{i}.values"] = blk.values
        return out


def embed(backbone: Backbone, x):
    """Class token followed by the linearly embedded feature tokens; ``x`` is ``(B, N-1, raw)``."""
    cfg = backbone.cfg
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (cfg.tokens - 1, cfg.raw_dim):
        raise DimensionError(f"expected inputs of shape (*, {cfg.tokens - 1}, {cfg.raw_dim}), got {x.shape}")
    p = backbone.params
    feats = x @ p["embed.w"] + p["embed.b"] + p["embed.pos"]
    cls_tok = np.broadcast_to(p["cls"], (x.shape[0], 1, cfg.embed_dim))
    out = np.concatenate([cls_tok, feats], axis=1)
    return out[0] if single else out


def make_router(k, noise_cfg: NoiseConfig, freq, train, rng, record):
    """Build the score -> mask callback for one prompted layer."""

    def route(scores):
        if k == DENSE or k >= scores.shape[-1]:
            noise = np.zeros_like(scores)
            mask = np.ones(scores.shape, dtype=bool)
        else:
            noise = adaptive_noise(scores, freq, noise_cfg, train=train, rng=rng)
            mask = selection_mask(select_experts(scores, noise, k), scores.shape[-1])
        record["noise"] = noise
        return mask

    return route


def encode(state: LearnerState, x, train=False, noise_cfg=NoiseConfig(), rng=None, k=None,
           masks=None, use_prompts=True, counter=None, need_cache=False):
    """Forward pass to the representation ``z`` (class-token output).

    ``k`` overrides the configured selection size (``DENSE`` for dense
    prompting). ``masks`` replays fixed per-layer selection masks, which holds
    routing constant for gradient checks. Returns ``(z, routing, cache)``.
    """
    cfg = state.cfg
    bb = state.backbone
    p = bb.params
    k = cfg.select_k if k is None else k
    tokens = embed(bb, x)
    if tokens.ndim == 2:
        tokens = tokens[None]
    h = tokens
    caches, routing = [], []
    for i in range(cfg.depth):
        prompted = use_prompts and i < len(state.prompts) and i < cfg.prompt_layers
        h1, c1 = layernorm(h, p[f"blocks.{i}.ln1.g"], p[f"blocks.{i}.ln1.b"])
        aw = bb.attention(i)
        record = {}
        if prompted:
            blk = state.prompts[i]
            if masks is not None:
                fixed = masks[i]
                route = lambda s, fixed=fixed: fixed
                record["noise"] = None
            elif cfg.score_mode == PROXY:
                route = make_router(k, noise_cfg, blk.frequency, train, rng, record)
            else:
                route = None
            a, ca, scores, mask = pm.attention_forward(h1, aw, blk.keys, blk.values, cfg.score_mode,
                                                      route, counter)
            if scores is not None:
                if not np.all(np.isfinite(scores)):
                    raise NumericError(f"non-finite prompt scores in layer {i}")
                noise = record.get("noise")
                routing.append(LayerRouting(i, scores, np.zeros_like(scores) if noise is None else noise, mask))
        else:
            a, ca, _, _ = pm.attention_forward(h1, aw)
        h2 = h + a
        g2, c2 = layernorm(h2, p[f"blocks.{i}.ln2.g"], p[f"blocks.{i}.ln2.b"])
        u = g2 @ p[f"blocks.{i}.w1"] + p[f"blocks.{i}.b1"]
        t = np.tanh(_GELU_C * (u + 0.044715 * u * u * u))
        act = 0.5 * u * (1.0 + t)
        h = h2 + act @ p[f"blocks.{i}.w2"] + p[f"blocks.{i}.b2"]
        if need_cache:
            caches.append((c1, ca, c2, g2, u, t, act))
    out, cf = layernorm(h, p["norm.g"], p["norm.b"])
    z = out[:, 0]
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite representation")
    cache = None
    if need_cache:
        xr = np.asarray(x, dtype=DTYPE)
        cache = {"blocks": caches, "norm": cf, "shape": out.shape, "x": xr if xr.ndim == 3 else xr[None]}
    return z, routing, cache


def encode_backward(state: LearnerState, cache, dz, dscores=None, need_weight_grads=False):
    """Backpropagate ``dz`` through the encoder.

    ``dscores`` maps prompted layer index -> extra gradient on its proxy scores.
    Returns a dict of gradients keyed like ``LearnerState.prompt_params`` (and
    backbone parameter names when ``need_weight_grads``).
    """
    cfg = state.cfg
    bb = state.backbone
    p = bb.params
    grads = {}
    dout = np.zeros(cache["shape"])
    dout[:, 0] = dz
    dh, gg, gb = layernorm_backward(dout, p["norm.g"], cache["norm"])
    if need_weight_grads:
        grads["norm.g"], grads["norm.b"] = gg, gb
    for i in reversed(range(cfg.depth)):
        c1, ca, c2, g2, u, t, act = cache["blocks"][i]
        # MLP branch
        dy = dh
        if need_weight_grads:
            grads[f"blocks.{i}.w2"] = act.reshape(-1, act.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
            grads[f"blocks.{i}.b2"] = dy.sum(axis=(0, 1))
        du = (dy @ p[f"blocks.{i}.w2"].T) * gelu_tanh_grad(u, t)
        if need_weight_grads:
            grads[f"blocks.{i}.w1"] = g2.reshape(-1, g2.shape[-1]).T @ du.reshape(-1, du.shape[-1])
            grads[f"blocks.{i}.b1"] = du.sum(axis=(0, 1))
        dg2 = du @ p[f"blocks.{i}.w1"].T
        dln2, gg, gb = layernorm_backward(dg2, p[f"blocks.{i}.ln2.g"], c2)
        if need_weight_grads:
            grads[f"blocks.{i}.ln2.g"], grads[f"blocks.{i}.ln2.b"] = gg, gb
        dh2 = dh + dln2
        # attention branch
        ds = None if dscores is None else dscores.get(i)
        dh1, ag = pm.attention_backward(dh2, ca, bb.attention(i), dscores=ds,
                                        need_weight_grads=need_weight_grads)
        if "keys" in ag:
            grads[f"prompts.{i}.keys"] = ag.pop("keys")
            grads[f"prompts.{i}.values"] = ag.pop("values")
        if need_weight_grads:
            for name, g in ag.items():
                grads[f"blocks.{i}.{name}"] = g
        dln1, gg, gb = layernorm_backward(dh1, p[f"blocks.{i}.ln1.g"], c1)
        if need_weight_grads:
            grads[f"blocks.{i}.ln1.g"], grads[f"blocks.{i}.ln1.b"] = gg, gb
        dh = dh2 + dln1
    if need_weight_grads:
        dtok = dh
        feats_grad = dtok[:, 1:]
        x = cache["x"]
        grads["embed.w"] = x.reshape(-1, x.shape[-1]).T @ feats_grad.reshape(-1, feats_grad.shape[-1])
        grads["embed.b"] = feats_grad.sum(axis=(0, 1))
        grads["embed.pos"] = feats_grad.sum(axis=0)
        grads["cls"] = dtok[:, 0].sum(axis=0)
    return grads


def forward(state: LearnerState, x, train=False, noise_cfg=NoiseConfig(), rng=None, **kw):
    """Representation and routing for ``x``; eval mode never applies noise."""
    z, routing, _ = encode(state, x, train=train, noise_cfg=noise_cfg, rng=rng, **kw)
    return z, routing


def predict(state: LearnerState, x, batch=256):
    preds = []
    for s in range(0, len(x), batch):
        z, _, _ = encode(state, x[s:s + batch])
        preds.append(np.argmax(classify(state.head, z), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "smope-checkpoint-v1"


def save_checkpoint(path, state: LearnerState):
    """Write ``state`` as an ``.npz`` archive.

    Layout: ``__meta__`` holds a JSON string with the format tag, model config,
    task counter and seen classes; every other entry is a float64/int64 array
    under a dotted name (``backbone.*``, ``prompts.<i>.{keys,values,selected_count,
    instance_count}``, ``head.{weight,bias}``, ``stats.<class>.{mean,cov}``,
    ``old_keys.<i>``). Shapes are stored in each array's npy header.
    """
    arrays = {f"backbone.{k}": np.asarray(v) for k, v in state.backbone.params.items()}
    for i, blk in enumerate(state.prompts):
        arrays[f"prompts.{i}.keys"] = blk.keys
        arrays[f"prompts.{i}.values"] = blk.values
        arrays[f"prompts.{i}.selected_count"] = blk.selected_count
        arrays[f"prompts.{i}.instance_count"] = blk.instance_count
    arrays["head.weight"] = state.head.weight
    arrays["head.bias"] = state.head.bias
    for c, (mu, cov) in state.class_stats.items():
        arrays[f"stats.{c}.mean"] = mu
        arrays[f"stats.{c}.cov"] = cov
    if state.old_keys is not None:
        for i, k in enumerate(state.old_keys):
            arrays[f"old_keys.{i}"] = k
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(state.cfg),
        "task": state.task,
        "seen_classes": [int(c) for c in state.seen_classes],
        "frozen": state.backbone.frozen,
        "has_old_keys": state.old_keys is not None,
    }
    arrays["__meta__"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> LearnerState:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unrecognised checkpoint format {meta.get('format')!r}")
        cfg = ModelConfig(**meta["config"])
        bb = Backbone(cfg, {k[len("backbone."):]: data[k].copy() for k in data.files if k.startswith("backbone.")})
        if meta["frozen"]:
            bb.freeze()
        prompts = []
        for i in range(cfg.prompt_layers):
            prompts.append(PromptBlock(data[f"prompts.{i}.keys"].copy(), data[f"prompts.{i}.values"].copy(),
                                       cfg.heads, data[f"prompts.{i}.selected_count"].copy(),
                                       data[f"prompts.{i}.instance_count"].copy()))
        head = ClassifierHead(data["head.weight"].copy(), data["head.bias"].copy())
        stats = {}
        for k in data.files:
            if k.startswith("stats.") and k.endswith(".mean"):
                c = int(k.split(".")[1])
                stats[c] = (data[k].copy(), data[f"stats.{c}.cov"].copy())
        old = [data[f"old_keys.{i}"].copy() for i in range(cfg.prompt_layers)] if meta["has_old_keys"] else None
    return LearnerState(cfg, bb, prompts, head, stats, old, meta["seen_classes"], meta["task"])
