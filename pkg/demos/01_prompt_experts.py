"""Prefix prompts as a mixture of experts inside one attention head.

Each prefix key/value pair acts as an extra expert. Its gating score against
token i is q_i . k_j. Averaging those scores over the tokens gives one proxy
score per expert, and that average only needs the mean token. Keeping the
top-K experts by proxy score gives sparse prefix attention at roughly 1/N of
the scoring cost.

    python demos/01_prompt_experts.py
"""

import numpy as np

from smope import make_rng
from smope.numerics import OpCounter
from smope.prefix_moe import (PROXY, TOKEN, AttentionWeights, attention_forward, head_outputs,
                              init_prompt_block, per_token_prompt_scores, proxy_scores,
                              smope_head_output_reference)
from smope.routing import select_experts, selection_mask

rng = make_rng(0)
n, d, heads, n_p, k = 17, 32, 4, 8, 2
w = AttentionWeights(*(rng.normal(0, 1 / np.sqrt(d), (d, d)) for _ in range(4)), np.zeros(d), heads)
prompts = init_prompt_block(rng, n_p, d, heads)
x = rng.normal(size=(n, d))

# 1. per-token scores (N x N_p) versus the proxy computed from the mean token
full = per_token_prompt_scores(x, prompts.keys, w.head(0))
proxy = proxy_scores(x, prompts.keys, w.head(0))
print("per-token score matrix:", full.shape)
print("proxy scores          :", np.round(proxy, 3))
print("max |mean - proxy|    :", np.abs(full.mean(axis=0) - proxy).max())

# 2. batched attention with top-K routing versus the explicit double loop
route = lambda s: selection_mask(select_experts(s, 0.0, k), n_p)
_, cache, scores, mask = attention_forward(x[None], w, prompts.keys, prompts.values, PROXY, route)
sel = np.flatnonzero(mask[0, 0])
ref = smope_head_output_reference(x, prompts.keys, prompts.values, sel, w.head(0))
print(f"\nselected experts in head 0: {sel}")
print("max |batched - loop|       :", np.abs(head_outputs(cache)[0, 0] - ref).max())

# 3. multiply-accumulates spent on prompt scores
cp, ct = OpCounter(), OpCounter()
attention_forward(x[None], w, prompts.keys, prompts.values, PROXY, counter=cp)
attention_forward(x[None], w, prompts.keys, prompts.values, TOKEN, counter=ct)
print(f"\nprompt-score MACs: per-token {ct['prompt_scores']}, proxy {cp['prompt_scores']} "
      f"({ct['prompt_scores'] / cp['prompt_scores']:.1f}x fewer, N = {n})")
