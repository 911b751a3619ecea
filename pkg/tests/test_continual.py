import warnings

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from smope.continual import (ABLATION_LADDER, HyperParams, StreamSpec, TaskLog, ablation_stage, cached_backbone,
                             estimate_class_gaussians, evaluate, faa_caa, full_method, generate_task_stream,
                             run_stream, sample_pseudo_representations, tap_refine, train_task, _cholesky)
from smope.model import DENSE, Backbone, ClassifierHead, LearnerState, ModelConfig, classify
from smope.numerics import make_rng
from smope.prefix_moe import TOKEN

TINY_SPEC = StreamSpec(n_tasks=2, classes_per_task=2, tokens=3, raw_dim=3, train_per_class=24, val_per_class=4,
                       test_per_class=10)
TINY_CFG = ModelConfig(depth=2, heads=2, embed_dim=8, tokens=4, raw_dim=3, prompt_layers=1, prompt_length=4,
                       select_k=2)


def tiny_state(seed=0):
    rng = make_rng(seed)
    bb = Backbone.init(TINY_CFG, rng)
    bb.freeze()
    return LearnerState.init(TINY_CFG, bb, rng)


def test_stream_disjoint_and_deterministic():
    a = generate_task_stream(StreamSpec(n_tasks=2), 3)
    b = generate_task_stream(StreamSpec(n_tasks=2), 3)
    assert not set(a.tasks[0].classes) & set(a.tasks[1].classes)
    for ta, tb in zip(a.tasks, b.tasks):
        assert ta.train.x.tobytes() == tb.train.x.tobytes() and ta.test.y.tobytes() == tb.test.y.tobytes()
    t = a.tasks[1]
    assert t.train.x.shape == (400, 16, 8) and t.test.x.shape == (200, 16, 8) and t.val.x.shape == (80, 16, 8)
    assert set(np.unique(t.train.y)) == {2, 3}


def test_stream_spec_validation():
    with pytest.raises(ValueError):
        generate_task_stream(StreamSpec(n_tasks=0), 0)
    with pytest.raises(ValueError):
        StreamSpec(noise=-1.0).validate()


def test_reference_stream_linearly_separable():
    stream = generate_task_stream(StreamSpec(), 0)
    for task in stream.tasks:
        clf = LogisticRegression(max_iter=2000).fit(task.train.x.reshape(len(task.train.y), -1), task.train.y)
        assert clf.score(task.test.x.reshape(len(task.test.y), -1), task.test.y) >= 0.95


def test_gaussian_examples():
    stats = estimate_class_gaussians({0: np.ones((5, 3))}, absolute=0.01)
    np.testing.assert_array_equal(stats[0][1], 0.01 * np.eye(3))
    stats = estimate_class_gaussians({0: np.array([[0.0, 0.0], [2.0, 0.0]])}, absolute=0.01)
    np.testing.assert_array_equal(stats[0][0], [1.0, 0.0])
    np.testing.assert_allclose(stats[0][1], [[1.01, 0.0], [0.0, 0.01]], atol=1e-15)
    # default ridge scales with the average variance
    stats = estimate_class_gaussians({0: np.array([[0.0, 0.0], [2.0, 0.0]])})
    np.testing.assert_allclose(stats[0][1], [[1 + 5e-5, 0], [0, 5e-5]], atol=1e-15)
    z = make_rng(0).normal(size=(50, 6))
    cov = estimate_class_gaussians({1: z})[1][1]
    assert np.max(np.abs(cov - cov.T)) <= 1e-15
    assert np.min(np.linalg.eigvalsh(cov)) > 0
    with pytest.raises(ValueError):
        estimate_class_gaussians({0: np.ones((1, 3))})


def test_cholesky_escalates_with_warning():
    bad = np.array([[1.0, 3.0], [3.0, 1.0]])
    with pytest.warns(UserWarning):
        with pytest.raises(Exception):
            _cholesky(bad)
    nearly = np.array([[1.0, 1.0], [1.0, 1.0 - 1e-12]])
    with pytest.warns(UserWarning):
        L = _cholesky(nearly)
    assert np.all(np.isfinite(L))


def test_pseudo_samples_equal_per_class():
    stats = {0: (np.zeros(2), np.eye(2)), 3: (np.ones(2), np.eye(2))}
    z, y = sample_pseudo_representations(stats, 7, make_rng(0))
    assert z.shape == (14, 2) and np.sum(y == 0) == np.sum(y == 3) == 7


def test_tap_single_class_and_separable():
    head = ClassifierHead.empty(2)
    head.grow(1)
    losses = []
    tap_refine(head, {0: (np.zeros(2), np.eye(2))}, 2, 16, make_rng(0), losses=losses)
    assert losses == [0.0, 0.0]
    head = ClassifierHead.empty(2)
    head.grow(2)
    stats = {0: (np.array([-4.0, 0.0]), np.eye(2)), 1: (np.array([4.0, 0.0]), np.eye(2))}
    tap_refine(head, stats, 5, 64, make_rng(1), lr=0.05)
    z, y = sample_pseudo_representations(stats, 500, make_rng(2))
    pred = classify(head, z).argmax(1)
    balanced = np.mean([np.mean(pred[y == c] == c) for c in (0, 1)])
    assert balanced >= 0.95


def test_faa_caa_examples():
    assert faa_caa([[0.7]]) == (0.7, 0.7)
    faa, caa = faa_caa([[0.8], [0.6, 1.0]])
    assert faa == pytest.approx(0.8, abs=1e-15) and caa == pytest.approx(0.8, abs=1e-15)
    assert faa_caa([[1.0], [1.0, 1.0], [1.0, 1.0, 1.0]]) == (1.0, 1.0)


def test_train_task_contract():
    stream = generate_task_stream(TINY_SPEC, 0)
    st = tiny_state()
    before = st.backbone.snapshot()
    rng = make_rng(0)
    hyper = HyperParams(epochs=2, tap=True, dense_warmup=True, epsilon=0.4, alpha_router=1e-3, alpha_proto=1e-3)
    log0 = TaskLog()
    train_task(st, stream.tasks[0], hyper, rng, log0)
    assert st.old_keys is None                       # no snapshot on the first task
    assert len(log0.dense_losses) == 1 and len(log0.losses) == 2 and len(log0.tap_losses) == 2
    assert st.head.n_classes == 2 and set(st.class_stats) == {0, 1}
    assert np.all(st.prompts[0].instance_count == 48)
    keys_after_first = st.prompts[0].keys.copy()
    log1 = TaskLog()
    train_task(st, stream.tasks[1], hyper, rng, log1)
    np.testing.assert_array_equal(st.old_keys[0], keys_after_first)
    assert log1.dense_losses == []                   # warm-up runs on the first task only
    assert st.head.n_classes == 4 and st.task == 2
    assert np.all(st.prompts[0].instance_count == 96)
    for k, v in before.items():
        assert v.tobytes() == st.backbone.params[k].tobytes()
    with pytest.raises(ValueError):
        train_task(st, stream.tasks[0], hyper, rng)


def test_tap_leaves_prompts_untouched():
    stream = generate_task_stream(TINY_SPEC, 1)
    st = tiny_state(1)
    train_task(st, stream.tasks[0], HyperParams(epochs=1), make_rng(0))
    keys = [b.keys.copy() for b in st.prompts]
    values = [b.values.copy() for b in st.prompts]
    head_before = st.head.copy()
    tap_refine(st.head, st.class_stats, 2, 16, make_rng(1))
    for b, k, v in zip(st.prompts, keys, values):
        assert b.keys.tobytes() == k.tobytes() and b.values.tobytes() == v.tobytes()
    assert not np.array_equal(head_before.weight, st.head.weight)


def test_evaluate_row_shapes():
    stream = generate_task_stream(TINY_SPEC, 0)
    st = tiny_state()
    train_task(st, stream.tasks[0], HyperParams(epochs=1), make_rng(0))
    row = evaluate(st, stream, 0)
    assert len(row) == 1 and 0.0 <= row[0] <= 1.0


def test_non_finite_loss_aborts():
    stream = generate_task_stream(TINY_SPEC, 0)
    st = tiny_state()
    st.prompts[0].keys[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        train_task(st, stream.tasks[0], HyperParams(epochs=1), make_rng(0))


def test_hyper_validation():
    with pytest.raises(ValueError):
        HyperParams(epochs=0)
    with pytest.raises(ValueError):
        HyperParams(epsilon=2.0)
    with pytest.raises(ValueError):
        HyperParams(alpha_router=-1.0)


def test_ablation_rows():
    names = [n for n, _, _ in ABLATION_LADDER]
    assert names[0] == "One Prompt" and names[-1] == "+ Prototype Loss" and len(names) == 8
    full = full_method()
    cfg, hp = ablation_stage("One Prompt", ModelConfig(), full)
    assert cfg.score_mode == TOKEN and cfg.select_k == DENSE and hp.epsilon == 0 and not hp.tap
    cfg, hp = ablation_stage("+ Adaptive Noise", ModelConfig(), full)
    assert cfg.select_k == 2 and hp.epsilon == full.epsilon and not hp.tap and hp.alpha_router == 0
    cfg, hp = ablation_stage("+ Prototype Loss", ModelConfig(), full)
    assert hp == full
    with pytest.raises(KeyError):
        ablation_stage("+ Something", ModelConfig(), full)


def test_dense_loss_decreases_on_reference_stream():
    spec = StreamSpec()
    stream = generate_task_stream(spec, 0)
    cfg = ModelConfig(select_k=8)
    rng = make_rng(0)
    st = LearnerState.init(cfg, cached_backbone(cfg, 0, 300, spec), rng)
    log = TaskLog()
    train_task(st, stream.tasks[0], HyperParams(epochs=5), rng, log)
    assert all(b < a for a, b in zip(log.losses, log.losses[1:])), log.losses


@pytest.mark.slow
def test_full_method_beats_one_prompt():
    spec = StreamSpec()
    wins = []
    for seed in range(3):
        stream = generate_task_stream(spec, seed)
        faa = {}
        for row in ("One Prompt", "+ Prototype Loss"):
            cfg, hp = ablation_stage(row, ModelConfig(), full_method())
            faa[row] = faa_caa(run_stream(cfg, stream, hp, seed)[1])[0]
        wins.append(faa["+ Prototype Loss"] > faa["One Prompt"])
    assert all(wins)
