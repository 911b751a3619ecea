"""Prefix-tuned attention viewed as a mixture of prompt experts.

Two families live here:

* single-head functions (``per_token_prompt_scores``, ``proxy_scores``,
  ``assemble_attention`` and the ``*_reference`` evaluators) that follow the
  per-token MoE formulas literally and serve as oracles;
* the batched training path (``attention_forward`` / ``attention_backward``)
  used by the model, which shares the prompt scores of one averaged query
  across all rows of the attention matrix.

A "head" in the single-head functions is a tuple ``(w_q, w_k, w_v)`` of
``d x d_k`` projection matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DTYPE, DimensionError, softmax_backward, softmax_masked

TOKEN = "token"
PROXY = "proxy"


@dataclass
class PromptBlock:
    """Prefix keys/values of one prompted layer plus per-head usage statistics."""

    keys: np.ndarray
    values: np.ndarray
    n_heads: int
    selected_count: np.ndarray = None
    instance_count: np.ndarray = None

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=DTYPE)
        self.values = np.asarray(self.values, dtype=DTYPE)
        if self.keys.shape != self.values.shape:
            raise DimensionError("prefix keys and values must share a shape")
        if self.selected_count is None:
            self.selected_count = np.zeros((self.n_heads, self.n_prompts), dtype=np.int64)
        if self.instance_count is None:
            self.instance_count = np.zeros(self.n_heads, dtype=np.int64)

    @property
    def n_prompts(self):
        return self.keys.shape[0]

    @property
    def frequency(self):
        """Per-head lifetime selection frequency, shape ``(heads, n_prompts)``."""
        inst = self.instance_count[:, None].astype(DTYPE)
        out = np.zeros(self.selected_count.shape, dtype=DTYPE)
        np.divide(self.selected_count, inst, out=out, where=inst > 0)
        return out

    def copy(self):
        return PromptBlock(self.keys.copy(), self.values.copy(), self.n_heads,
                           self.selected_count.copy(), self.instance_count.copy())


@dataclass
class RoutingDecision:
    layer: int
    head: int
    scores: np.ndarray
    noise: np.ndarray
    selected: np.ndarray


def init_prompt_block(rng, n_prompts, d, n_heads):
    scale = 1.0 / np.sqrt(d)
    keys = rng.uniform(-scale, scale, size=(n_prompts, d))
    values = rng.uniform(-scale, scale, size=(n_prompts, d))
    return PromptBlock(keys, values, n_heads)


def _check(x, keys, head):
    w_q, w_k, _ = head
    if x.ndim != 2 or keys.ndim != 2 or x.shape[1] != keys.shape[1] or w_q.shape[0] != x.shape[1] \
            or w_k.shape != w_q.shape:
        raise DimensionError("inconsistent shapes for tokens, prefix keys and head projections")


def per_token_prompt_scores(x, keys, head):
    """Entry ``(i, j)`` is ``x_i^T W_q W_k^T p_j / sqrt(d_v)``."""
    x = np.asarray(x, dtype=DTYPE)
    keys = np.asarray(keys, dtype=DTYPE)
    _check(x, keys, head)
    w_q, w_k, w_v = head
    return (x @ w_q) @ (keys @ w_k).T / np.sqrt(w_v.shape[1])


def proxy_scores(x, keys, head):
    """Prompt scores of the mean token; equals the column mean of the per-token scores."""
    x = np.asarray(x, dtype=DTYPE)
    keys = np.asarray(keys, dtype=DTYPE)
    _check(x, keys, head)
    w_q, w_k, w_v = head
    x_bar = x.mean(axis=0)
    return (x_bar @ w_q) @ (keys @ w_k).T / np.sqrt(w_v.shape[1])


def assemble_attention(x, keys, selected, head):
    """Attention logits ``[prompt | pre-trained]`` of shape ``(N, K + N)``.

    The prompt block holds the proxy scores of the selected experts, repeated on
    every row.
    """
    selected = np.asarray(selected, dtype=np.int64)
    if selected.size == 0 or selected.min() < 0 or selected.max() >= keys.shape[0]:
        raise IndexError("selected expert index out of range")
    w_q, w_k, w_v = head
    n = x.shape[0]
    s_bar = proxy_scores(x, keys, head)[selected]
    pre = (x @ w_q) @ (x @ w_k).T / np.sqrt(w_v.shape[1])
    return np.concatenate([np.broadcast_to(s_bar, (n, selected.size)), pre], axis=1)


def smope_head_output_reference(x, keys, values, selected, head, prompt_scores=None):
    """Direct token-by-token evaluation of the sparse prompt-expert mixture.

    Output row ``i`` mixes the pre-trained experts ``W_v^T x_j`` and the selected
    prompt experts ``W_v^T p^V_j'`` with softmax weights whose denominator runs
    over the pre-trained scores and the selected prompt scores only.
    ``prompt_scores`` overrides the proxy scores; pass an ``(N, N_p)`` matrix to
    give each token its own prompt scores.
    """
    x = np.asarray(x, dtype=DTYPE)
    w_q, w_k, w_v = head
    n = x.shape[0]
    scale = np.sqrt(w_v.shape[1])
    selected = [int(j) for j in selected]
    if not selected:
        raise ValueError("at least one prompt expert must be selected")
    if prompt_scores is None:
        prompt_scores = proxy_scores(x, keys, head)
    prompt_scores = np.asarray(prompt_scores, dtype=DTYPE)
    out = np.zeros((n, w_v.shape[1]))
    for i in range(n):
        s_pre = [float(x[i] @ w_q @ w_k.T @ x[j]) / scale for j in range(n)]
        if prompt_scores.ndim == 2:
            s_prompt = {j: float(prompt_scores[i, j]) for j in selected}
        else:
            s_prompt = {j: float(prompt_scores[j]) for j in selected}
        top = max(max(s_pre), max(s_prompt.values()))
        denom = sum(np.exp(s - top) for s in s_pre) + sum(np.exp(s - top) for s in s_prompt.values())
        for j in range(n):
            out[i] += np.exp(s_pre[j] - top) / denom * (w_v.T @ x[j])
        for j in selected:
            out[i] += np.exp(s_prompt[j] - top) / denom * (w_v.T @ values[j])
    return out


def prefix_attention_reference(x, keys, values, head):
    """One head of plain prefix tuning: prompts prepended to keys and values."""
    x = np.asarray(x, dtype=DTYPE)
    w_q, w_k, w_v = head
    scale = np.sqrt(w_v.shape[1])
    q = x @ w_q
    k = np.concatenate([np.asarray(keys).reshape(-1, x.shape[1]), x]) @ w_k
    v = np.concatenate([np.asarray(values).reshape(-1, x.shape[1]), x]) @ w_v
    return softmax_masked(q @ k.T / scale) @ v


def msa_head_reference(x, head):
    return prefix_attention_reference(x, np.zeros((0, x.shape[1])), np.zeros((0, x.shape[1])), head)


# ---------------------------------------------------------------------------
# batched training path
# ---------------------------------------------------------------------------


@dataclass
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    n_heads: int

    @property
    def head_dim(self):
        return self.w_q.shape[1] // self.n_heads

    def head(self, l):
        k = self.head_dim
        sl = slice(l * k, (l + 1) * k)
        return self.w_q[:, sl], self.w_k[:, sl], self.w_v[:, sl]


@dataclass
class AttentionCache:
    h: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    ctx: np.ndarray
    q_bar: np.ndarray = None
    kp: np.ndarray = None
    vp: np.ndarray = None
    mode: str = None
    extras: dict = field(default_factory=dict)


def _split(a, m):
    b, n, d = a.shape
    return a.reshape(b, n, m, d // m).transpose(0, 2, 1, 3)


def _merge(a):
    b, m, n, k = a.shape
    return a.transpose(0, 2, 1, 3).reshape(b, n, m * k)


def attention_forward(h, w: AttentionWeights, keys=None, values=None, mode=PROXY,
                      route=None, counter=None):
    """Batched multi-head attention over ``h`` of shape ``(B, N, d)``.

    With prefix keys/values, ``mode`` picks the prompt logits: ``"proxy"`` uses
    one score per (sample, head, expert) computed from the mean query and
    repeated over rows; ``"token"`` uses the per-token scores of plain prefix
    tuning. ``route(scores)`` maps proxy scores ``(B, m, N_p)`` to a boolean
    selection mask of the same shape; ``None`` selects every expert.

    Returns ``(out, cache, scores, mask)``; scores/mask are ``None`` without prompts.
    """
    m = w.n_heads
    dk = w.head_dim
    scale = 1.0 / np.sqrt(dk)
    b, n, _ = h.shape
    q = _split(h @ w.w_q, m)
    k = _split(h @ w.w_k, m)
    v = _split(h @ w.w_v, m)
    pre = q @ k.transpose(0, 1, 3, 2) * scale
    cache = AttentionCache(h=h, q=q, k=k, v=v, probs=None, ctx=None, mode=mode)
    scores = mask = None
    if keys is None or keys.shape[0] == 0:
        probs = softmax_masked(pre)
        ctx = probs @ v
    else:
        n_p = keys.shape[0]
        kp = (keys @ w.w_k).reshape(n_p, m, dk).transpose(1, 0, 2)
        vp = (values @ w.w_v).reshape(n_p, m, dk).transpose(1, 0, 2)
        cache.kp, cache.vp = kp, vp
        cache.extras = {"keys": keys, "values": values}
        if mode == PROXY:
            q_bar = q.mean(axis=2)
            scores = np.einsum("bhk,hpk->bhp", q_bar, kp) * scale
            cache.q_bar = q_bar
            if counter is not None:
                counter.add("prompt_scores", b * m * (dk + n_p * dk))
            mask = np.ones(scores.shape, dtype=bool) if route is None else np.asarray(route(scores), dtype=bool)
            prompt_logits = np.broadcast_to(scores[:, :, None, :], (b, m, n, n_p))
            full_mask = np.concatenate(
                [np.broadcast_to(mask[:, :, None, :], (b, m, n, n_p)), np.ones((b, m, n, n), dtype=bool)],
                axis=-1)
        elif mode == TOKEN:
            prompt_logits = np.einsum("bhnk,hpk->bhnp", q, kp) * scale
            if counter is not None:
                counter.add("prompt_scores", b * m * n * n_p * dk)
            full_mask = None
        else:
            raise ValueError(f"unknown prompt score mode {mode!r}")
        logits = np.concatenate([prompt_logits, pre], axis=-1)
        probs = softmax_masked(logits, full_mask)
        ctx = probs[..., :n_p] @ vp[None] + probs[..., n_p:] @ v
    cache.probs = probs
    cache.ctx = ctx
    out = _merge(ctx) @ w.w_o + w.b_o
    return out, cache, scores, mask


def attention_backward(dout, cache: AttentionCache, w: AttentionWeights, dscores=None,
                       need_weight_grads=False):
    """Backward pass of ``attention_forward``.

    ``dscores`` is an extra gradient on the proxy scores (router loss). Returns
    ``(dh, grads)`` where grads holds ``keys``/``values`` for prompted layers and
    the projection weights when ``need_weight_grads`` is set.
    """
    m = w.n_heads
    dk = w.head_dim
    scale = 1.0 / np.sqrt(dk)
    h, q, k, v, probs = cache.h, cache.q, cache.k, cache.v, cache.probs
    n = h.shape[1]
    grads = {}
    merged = _merge(cache.ctx)
    if need_weight_grads:
        grads["w_o"] = merged.reshape(-1, merged.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
        grads["b_o"] = dout.sum(axis=(0, 1))
    dctx = _split(dout @ w.w_o.T, m)
    prompted = cache.kp is not None
    n_p = cache.kp.shape[1] if prompted else 0
    p_prompt, p_pre = probs[..., :n_p], probs[..., n_p:]
    dv = p_pre.transpose(0, 1, 3, 2) @ dctx
    dprobs_pre = dctx @ v.transpose(0, 1, 3, 2)
    if prompted:
        dprobs_prompt = dctx @ cache.vp[None].transpose(0, 1, 3, 2)
        dvp = np.einsum("bhnp,bhnk->hpk", p_prompt, dctx)
        dlogits = softmax_backward(probs, np.concatenate([dprobs_prompt, dprobs_pre], axis=-1))
        dl_prompt, dl_pre = dlogits[..., :n_p], dlogits[..., n_p:]
    else:
        dl_pre = softmax_backward(probs, dprobs_pre)
    dq = dl_pre @ k * scale
    dk_ = dl_pre.transpose(0, 1, 3, 2) @ q * scale
    if prompted:
        kp = cache.kp
        if cache.mode == PROXY:
            ds = dl_prompt.sum(axis=2)
            if dscores is not None:
                ds = ds + dscores
            dq_bar = np.einsum("bhp,hpk->bhk", ds, kp) * scale
            dkp = np.einsum("bhp,bhk->hpk", ds, cache.q_bar) * scale
            dq = dq + dq_bar[:, :, None, :] / n
        else:
            dq = dq + np.einsum("bhnp,hpk->bhnk", dl_prompt, kp) * scale
            dkp = np.einsum("bhnp,bhnk->hpk", dl_prompt, q) * scale
        dkp_flat = dkp.transpose(1, 0, 2).reshape(n_p, m * dk)
        dvp_flat = dvp.transpose(1, 0, 2).reshape(n_p, m * dk)
        grads["keys"] = dkp_flat @ w.w_k.T
        grads["values"] = dvp_flat @ w.w_v.T
    dq_m, dk_m, dv_m = _merge(dq), _merge(dk_), _merge(dv)
    dh = dq_m @ w.w_q.T + dk_m @ w.w_k.T + dv_m @ w.w_v.T
    if need_weight_grads:
        hf = h.reshape(-1, h.shape[-1])
        grads["w_q"] = hf.T @ dq_m.reshape(-1, dq_m.shape[-1])
        grads["w_k"] = hf.T @ dk_m.reshape(-1, dk_m.shape[-1])
        grads["w_v"] = hf.T @ dv_m.reshape(-1, dv_m.shape[-1])
        if prompted:
            grads["w_k"] += cache.extras["keys"].T @ dkp_flat
            grads["w_v"] += cache.extras["values"].T @ dvp_flat
    return dh, grads


def head_outputs(cache: AttentionCache):
    """Per-head attention outputs ``(B, m, N, d_k)`` before the output projection."""
    return cache.ctx
