import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from smope.numerics import make_rng
from smope.prefix_moe import PromptBlock, RoutingDecision
from smope.routing import (ConfigurationError, NoiseConfig, adaptive_noise, select_experts, selection_mask,
                           update_usage, usage_entropy, write_usage_csv)


def test_noise_config_validation():
    with pytest.raises(ConfigurationError):
        NoiseConfig(1.5)
    with pytest.raises(ConfigurationError):
        NoiseConfig(0.1, "gaussian")


def test_adaptive_noise_examples():
    cfg = NoiseConfig(0.5)
    np.testing.assert_array_equal(adaptive_noise([1, 3, 5], [0.6, 0.3, 0.3], cfg), [2.0, 0.0, 0.0])
    assert np.all(adaptive_noise([1, 3, 5], [0.6, 0.3, 0.3], NoiseConfig(0.0)) == 0)
    assert np.all(adaptive_noise([2, 2, 2], [0.9, 0.0, 0.1], cfg) == 0)
    assert np.all(adaptive_noise([1, 3, 5], [0.6, 0.3, 0.3], cfg, train=False) == 0)


def test_noise_gate_boundary_and_modes():
    # all-equal frequency gates every expert
    np.testing.assert_array_equal(adaptive_noise([0, 1], [0.5, 0.5], NoiseConfig(1.0)), [1.0, 1.0])
    np.testing.assert_array_equal(adaptive_noise([0, 1, 4], [0.5, 0.25, 0.0], NoiseConfig(0.3, "fixed")),
                                  [0.3, 0.3, 0.0])
    u = adaptive_noise(np.zeros((100, 3)), [0.2, 0.1, 0.0], NoiseConfig(0.3, "uniform"), rng=make_rng(0))
    assert u.shape == (100, 3) and np.max(np.abs(u)) <= 0.3 and np.all(u != 0)
    with pytest.raises(ValueError):
        adaptive_noise([0, 1], [0, 1], NoiseConfig(0.3, "uniform"))


def test_noise_per_sample_range():
    scores = np.array([[0.0, 1.0, 2.0], [0.0, 10.0, 0.0]])
    out = adaptive_noise(scores, [1.0, 0.0, 0.0], NoiseConfig(0.5))
    np.testing.assert_array_equal(out, [[1.0, 0, 0], [5.0, 0, 0]])


def test_select_examples():
    np.testing.assert_array_equal(select_experts([0.1, 0.9, 0.5], 0, 2), [1, 2])
    np.testing.assert_array_equal(select_experts([5, 5, 1], 0, 1), [0])
    np.testing.assert_array_equal(select_experts([1, 3, 5], [0, 0, 2.5], 1), [1])
    with pytest.raises(ConfigurationError):
        select_experts([1, 2], 0, 3)


def test_select_batched():
    s = np.array([[[3, 1, 2]], [[0, 0, 9]]], dtype=float)
    out = select_experts(s, np.zeros_like(s), 2)
    np.testing.assert_array_equal(out, [[[0, 2]], [[0, 2]]])
    np.testing.assert_array_equal(selection_mask(out, 3), [[[True, False, True]], [[True, False, True]]])


@settings(max_examples=200, deadline=None)
@given(arrays(np.int64, 8, elements=st.integers(-1000, 1000), unique=True), st.integers(1, 8),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_select_affine_invariance(s, k, a, b):
    s = s / 100.0
    noise = np.where(s > 0, 0.505, 0.0)   # never creates ties on the 0.01 grid
    base = select_experts(s, noise, k)
    assert set(select_experts(a * (s - noise) + b, 0, k)) == set(base)


def test_update_usage_examples():
    blk = PromptBlock(np.zeros((4, 2)), np.zeros((4, 2)), 1)
    update_usage(blk, [])
    assert np.all(blk.frequency == 0)
    update_usage(blk, [RoutingDecision(0, 0, np.zeros(4), np.zeros(4), np.array([0, 2]))])
    np.testing.assert_array_equal(blk.frequency[0], [1, 0, 1, 0])
    blk = PromptBlock(np.zeros((4, 2)), np.zeros((4, 2)), 1)
    for _ in range(2):
        update_usage(blk, [RoutingDecision(0, 0, None, None, np.array([0, 3])) for _ in range(10)])
    assert blk.frequency[0, 0] == 1.0 and blk.instance_count[0] == 20


def test_update_usage_masks_and_errors():
    blk = PromptBlock(np.zeros((4, 2)), np.zeros((4, 2)), 2)
    masks = selection_mask(np.array([[[0, 1], [2, 3]], [[0, 2], [1, 3]]]), 4)
    update_usage(blk, [masks])
    np.testing.assert_array_equal(blk.selected_count.sum(axis=1), 2 * blk.instance_count)
    with pytest.raises(IndexError):
        update_usage(blk, [RoutingDecision(0, 5, None, None, np.array([0]))])
    with pytest.raises(IndexError):
        update_usage(blk, [np.ones((2, 3, 4), dtype=bool)])


def test_usage_entropy_examples():
    assert abs(usage_entropy(np.ones(5)) - np.log(5)) < 1e-15
    assert usage_entropy([0, 1, 0]) == 0.0
    p = np.array([0.5, 0.25, 0.25])
    assert abs(usage_entropy([0.5, 0.25, 0.25, 0]) - float(-(p * np.log(p)).sum())) < 1e-15
    assert abs(usage_entropy([0.5, 0.25, 0.25, 0]) - 1.0397) < 1e-4
    with pytest.raises(ValueError):
        usage_entropy(np.zeros(3))


def test_write_usage_csv(tmp_path):
    blk = PromptBlock(np.zeros((3, 2)), np.zeros((3, 2)), 2)
    update_usage(blk, [selection_mask(np.array([[[0], [2]]]), 3)])
    path = tmp_path / "usage.csv"
    write_usage_csv(path, [blk, blk])
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 12
    assert rows[0] == {"layer": "0", "head": "0", "expert": "0", "frequency": "1.0"}
