import numpy as np
import pytest

from smope.numerics import OpCounter, make_rng
from smope.prefix_moe import (PROXY, TOKEN, AttentionWeights, PromptBlock, assemble_attention,
                              attention_forward, head_outputs, init_prompt_block, msa_head_reference,
                              per_token_prompt_scores, prefix_attention_reference, proxy_scores,
                              smope_head_output_reference)
from smope.routing import selection_mask
from smope.numerics import softmax_masked

from conftest import random_head


def test_per_token_scores_zero_keys(rng):
    head = random_head(rng, 4, 2)
    s = per_token_prompt_scores(rng.normal(size=(3, 4)), np.zeros((5, 4)), head)
    assert s.shape == (3, 5) and np.all(s == 0)


def test_per_token_scores_identical_rows(rng):
    head = random_head(rng, 4, 2)
    x = np.tile(rng.normal(size=4), (3, 1))
    s = per_token_prompt_scores(x, rng.normal(size=(2, 4)), head)
    assert np.all(s == s[0])


def test_per_token_scores_match_loops(rng):
    d, n, n_p = 4, 3, 2
    w_q, w_k, w_v = random_head(rng, d, 2)
    x, keys = rng.normal(size=(n, d)), rng.normal(size=(n_p, d))
    s = per_token_prompt_scores(x, keys, (w_q, w_k, w_v))
    for i in range(n):
        for j in range(n_p):
            ref = sum(x[i, a] * w_q[a, c] * w_k[b, c] * keys[j, b]
                      for a in range(d) for b in range(d) for c in range(2)) / np.sqrt(2)
            assert abs(s[i, j] - ref) < 1e-12


def test_proxy_scores_examples(rng):
    head = random_head(rng, 6, 3)
    keys = rng.normal(size=(4, 6))
    row = rng.normal(size=6)
    x = np.tile(row, (5, 1))
    np.testing.assert_allclose(proxy_scores(x, keys, head), per_token_prompt_scores(x, keys, head)[0], atol=1e-14)
    assert np.all(proxy_scores(np.zeros((5, 6)), keys, head) == 0)
    x = rng.normal(size=(5, 6))
    np.testing.assert_allclose(proxy_scores(x, keys, head), per_token_prompt_scores(x, keys, head).mean(axis=0),
                               atol=1e-12, rtol=0)


def test_assemble_attention_shapes(rng):
    head = random_head(rng, 6, 3)
    x, keys = rng.normal(size=(5, 6)), rng.normal(size=(4, 6))
    a = assemble_attention(x, keys, [0, 1, 2, 3], head)
    assert a.shape == (5, 9)
    assert np.all(a[:, :4] == a[0, :4])
    x1 = rng.normal(size=(1, 6))
    a1 = assemble_attention(x1, keys, [1, 3], head)
    np.testing.assert_allclose(a1[0, :2], per_token_prompt_scores(x1, keys, head)[0, [1, 3]], atol=1e-14)
    with pytest.raises(IndexError):
        assemble_attention(x, keys, [4], head)


def test_assembled_softmax_equals_reference(rng):
    head = random_head(rng, 6, 3)
    x, keys, values = rng.normal(size=(5, 6)), rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    selected = [1, 3]
    a = assemble_attention(x, keys, selected, head)
    v = np.concatenate([values[selected] @ head[2], x @ head[2]])
    out = softmax_masked(a) @ v
    np.testing.assert_allclose(out, smope_head_output_reference(x, keys, values, selected, head), atol=1e-10)


def test_reference_empty_selection(rng):
    head = random_head(rng, 4, 2)
    with pytest.raises(ValueError):
        smope_head_output_reference(rng.normal(size=(3, 4)), np.zeros((2, 4)), np.zeros((2, 4)), [], head)


def test_reference_limit_is_plain_msa(rng):
    head = random_head(rng, 4, 2)
    x = rng.normal(size=(3, 4))
    keys = rng.normal(size=(2, 4))
    scores = -1e4 * np.ones(2)
    out = smope_head_output_reference(x, keys, rng.normal(size=(2, 4)), [0, 1], head, prompt_scores=scores)
    np.testing.assert_allclose(out, msa_head_reference(x, head), atol=1e-6)


def test_reference_zero_values_scales_msa(rng):
    w_q, w_k, w_v = head = random_head(rng, 4, 2)
    x, keys = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    selected = [0, 2]
    out = smope_head_output_reference(x, keys, np.zeros((3, 4)), selected, head)
    s_pre = (x @ w_q) @ (x @ w_k).T / np.sqrt(2)
    s_prompt = proxy_scores(x, keys, head)[selected]
    pre_mass = np.exp(s_pre).sum(1) / (np.exp(s_pre).sum(1) + np.exp(s_prompt).sum())
    np.testing.assert_allclose(out, msa_head_reference(x, head) * pre_mass[:, None], atol=1e-12)


def test_reference_scalar_case():
    w = np.array([[1.0]])
    head = (w, w, w)
    x, key, value = np.array([[0.5]]), np.array([[2.0]]), np.array([[3.0]])
    s_pre, s_prompt = 0.25, 1.0            # x*x and x*key, d_v = 1
    expected = (np.exp(s_pre) * 0.5 + np.exp(s_prompt) * 3.0) / (np.exp(s_pre) + np.exp(s_prompt))
    out = smope_head_output_reference(x, key, value, [0], head)
    assert abs(out[0, 0] - expected) < 1e-14


def test_prefix_reference_identities(rng):
    head = random_head(rng, 4, 2)
    x = rng.normal(size=(3, 4))
    keys, values = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    np.testing.assert_allclose(prefix_attention_reference(x, np.zeros((0, 4)), np.zeros((0, 4)), head),
                               msa_head_reference(x, head), atol=0)
    per_tok = per_token_prompt_scores(x, keys, head)
    np.testing.assert_allclose(prefix_attention_reference(x, keys, values, head),
                               smope_head_output_reference(x, keys, values, [0, 1], head, prompt_scores=per_tok),
                               atol=1e-12)
    xs = np.tile(x[0], (3, 1))
    np.testing.assert_allclose(prefix_attention_reference(xs, keys, values, head),
                               smope_head_output_reference(xs, keys, values, [0, 1], head), atol=1e-12)


def _weights(rng, d, m):
    return AttentionWeights(*(rng.normal(0, 1 / np.sqrt(d), (d, d)) for _ in range(4)), rng.normal(size=d), m)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_batched_path_matches_reference(rng, k):
    d, m, n, n_p, b = 8, 2, 5, 4, 3
    w = _weights(rng, d, m)
    h = rng.normal(size=(b, n, d))
    blk = init_prompt_block(rng, n_p, d, m)
    sel = {}

    def route(scores):
        chosen = np.stack([[rng.permutation(n_p)[:k] for _ in range(m)] for _ in range(b)])
        sel["idx"] = chosen
        return selection_mask(chosen, n_p)

    _, cache, scores, mask = attention_forward(h, w, blk.keys, blk.values, PROXY, route)
    ctx = head_outputs(cache)
    for bi in range(b):
        for l in range(m):
            ref = smope_head_output_reference(h[bi], blk.keys, blk.values, np.sort(sel["idx"][bi, l]), w.head(l))
            np.testing.assert_allclose(ctx[bi, l], ref, atol=1e-10, rtol=0)
            np.testing.assert_allclose(scores[bi, l], proxy_scores(h[bi], blk.keys, w.head(l)), atol=1e-12)


def test_token_mode_matches_prefix_reference(rng):
    d, m, n, n_p = 8, 2, 5, 3
    w = _weights(rng, d, m)
    h = rng.normal(size=(2, n, d))
    blk = init_prompt_block(rng, n_p, d, m)
    _, cache, scores, mask = attention_forward(h, w, blk.keys, blk.values, TOKEN)
    assert scores is None and mask is None
    for bi in range(2):
        for l in range(m):
            np.testing.assert_allclose(head_outputs(cache)[bi, l],
                                       prefix_attention_reference(h[bi], blk.keys, blk.values, w.head(l)),
                                       atol=1e-12)


def test_attention_rows_sum_to_one(rng):
    d, m, n, n_p = 8, 2, 5, 4
    w = _weights(rng, d, m)
    blk = init_prompt_block(rng, n_p, d, m)
    route = lambda s: selection_mask(np.argsort(-s, axis=-1)[..., :2], n_p)
    _, cache, _, mask = attention_forward(rng.normal(size=(3, n, d)), w, blk.keys, blk.values, PROXY, route)
    assert np.max(np.abs(cache.probs.sum(-1) - 1)) < 1e-12
    unselected = ~np.broadcast_to(mask[:, :, None, :], cache.probs[..., :n_p].shape)
    assert np.all(cache.probs[..., :n_p][unselected] == 0.0)


def test_proxy_counts_fewer_macs(rng):
    d, m, n, n_p = 8, 2, 17, 4
    w = _weights(rng, d, m)
    blk = init_prompt_block(rng, n_p, d, m)
    h = rng.normal(size=(1, n, d))
    cp, ct = OpCounter(), OpCounter()
    attention_forward(h, w, blk.keys, blk.values, PROXY, counter=cp)
    attention_forward(h, w, blk.keys, blk.values, TOKEN, counter=ct)
    dk = d // m
    assert ct["prompt_scores"] == m * n * n_p * dk
    assert cp["prompt_scores"] == m * (dk + n_p * dk)


def test_prompt_block_frequency_and_copy():
    blk = PromptBlock(np.zeros((3, 4)), np.zeros((3, 4)), 2)
    assert blk.frequency.shape == (2, 3) and np.all(blk.frequency == 0)
    blk.selected_count[0, 1] = 2
    blk.instance_count[0] = 4
    c = blk.copy()
    c.selected_count[0, 1] = 0
    assert blk.frequency[0, 1] == 0.5
    with pytest.raises(ValueError):
        PromptBlock(np.zeros((3, 4)), np.zeros((2, 4)), 1)


def test_init_prompt_block_range():
    blk = init_prompt_block(make_rng(0), 25, 16, 4)
    assert np.max(np.abs(blk.keys)) <= 0.25 and blk.keys.shape == (25, 16)
