"""Gradient-boosted surrogate: fitting, prediction, ranking."""

import numpy as np
import pytest

from schedtune.costmodel import (
    CandidateEntry,
    GbtConfig,
    SurrogateModel,
    TrainingExample,
    rank_scores,
)


def entry(i, feats, canonical=None):
    return CandidateEntry(canonical=canonical or f"s{i}",
                          features=np.asarray(feats, dtype=np.float64),
                          state=None, order=i)


def rand_examples(rng, n, dim=6):
    X = rng.random((n, dim))
    y = 0.2 + 0.8 * rng.random(n)
    return [TrainingExample(features=X[i], target=float(y[i]))
            for i in range(n)]


def test_training_example_target_range():
    f = np.zeros(3)
    TrainingExample(features=f, target=1.0)
    TrainingExample(features=f, target=1e-6)
    with pytest.raises(ValueError):
        TrainingExample(features=f, target=0.0)
    with pytest.raises(ValueError):
        TrainingExample(features=f, target=1.2)
    with pytest.raises(ValueError):
        TrainingExample(features=f, target=-0.5)


def test_untrained_model_predicts_one():
    m = SurrogateModel()
    X = np.random.default_rng(0).random((5, 4))
    np.testing.assert_array_equal(m.predict(X), np.ones(5))


def test_single_example_fit_converges_to_target():
    m = SurrogateModel()
    ex = TrainingExample(features=np.array([1.0, 2.0]), target=0.8)
    m.fit_incremental([ex])
    assert m.predict(np.array([[1.0, 2.0]]))[0] == pytest.approx(0.8, abs=1e-9)


def test_constant_targets_fit():
    m = SurrogateModel()
    rng = np.random.default_rng(1)
    X = rng.random((20, 4))
    exs = [TrainingExample(features=X[i], target=0.5) for i in range(20)]
    m.fit_incremental(exs)
    pred = m.predict(X)
    np.testing.assert_allclose(pred, 0.5, atol=1e-3)


def test_two_cluster_targets_fit():
    m = SurrogateModel()
    rng = np.random.default_rng(2)
    X = rng.random((40, 3))
    X[:20, 0] += 2.0
    exs = [TrainingExample(features=X[i], target=0.9 if i < 20 else 0.1)
           for i in range(40)]
    m.fit_incremental(exs)
    y = np.array([0.9] * 20 + [0.1] * 20)
    mse = float(np.mean((m.predict(X) - y) ** 2))
    assert mse < 0.01


def test_fit_loss_never_increases():
    m = SurrogateModel()
    rng = np.random.default_rng(3)
    rep = m.fit_incremental(rand_examples(rng, 64))
    assert rep.loss_after <= rep.loss_before + 1e-12
    assert rep.n_examples == 64


def test_fit_deterministic():
    rng = np.random.default_rng(4)
    exs = rand_examples(rng, 50)
    X = np.stack([e.features for e in exs])
    a = SurrogateModel()
    a.fit_incremental(exs)
    b = SurrogateModel()
    b.fit_incremental(exs)
    np.testing.assert_array_equal(a.predict(X), b.predict(X))


def test_prediction_floor():
    cfg = GbtConfig(n_trees=20, max_depth=3, learning_rate=1.0)
    m = SurrogateModel(cfg)
    # all-min targets drive raw predictions to the small positive floor
    X = np.random.default_rng(5).random((10, 2))
    exs = [TrainingExample(features=X[i], target=1e-6) for i in range(10)]
    m.fit_incremental(exs)
    assert np.all(m.predict(X) >= 1e-6)


def test_permutation_equivariance():
    m = SurrogateModel()
    rng = np.random.default_rng(6)
    m.fit_incremental(rand_examples(rng, 30))
    X = rng.random((8, 6))
    perm = rng.permutation(8)
    np.testing.assert_array_equal(m.predict(X)[perm], m.predict(X[perm]))


def test_reward_is_relative_improvement():
    m = SurrogateModel()  # untrained: C() == 1 everywhere
    a = np.zeros((1, 3))
    b = np.ones((1, 3))
    assert m.reward(a, b)[0] == pytest.approx(0.0)

    rng = np.random.default_rng(7)
    m.fit_incremental(rand_examples(rng, 60, dim=3))
    pa = m.predict(a)[0]
    pb = m.predict(b)[0]
    assert m.reward(a, b)[0] == pytest.approx((pb - pa) / pa)
    assert m.reward(a, a)[0] == 0.0
    assert m.reward(b, a)[0] == pytest.approx((pa - pb) / pb)


def test_reward_batch_matches_scalar_loop():
    m = SurrogateModel()
    rng = np.random.default_rng(8)
    m.fit_incremental(rand_examples(rng, 40, dim=4))
    prev = rng.random((16, 4))
    nxt = rng.random((16, 4))
    batch = m.reward(prev, nxt)
    for i in range(16):
        assert batch[i] == pytest.approx(
            m.reward(prev[i:i + 1], nxt[i:i + 1])[0])


def test_observe_normalizes_per_subgraph():
    """Best throughput of each subgraph pins target 1; others scale down."""
    m = SurrogateModel()
    f = np.eye(4)
    m.observe(f[0], throughput=2e9, subgraph_id="a")
    m.observe(f[1], throughput=1e9, subgraph_id="a")
    m.observe(f[2], throughput=5e8, subgraph_id="b")
    exs = m.training_examples()
    targets = {tuple(e.features): e.target for e in exs}
    assert targets[tuple(f[0])] == pytest.approx(1.0)
    assert targets[tuple(f[1])] == pytest.approx(0.5)
    assert targets[tuple(f[2])] == pytest.approx(1.0)  # best of its own group


def test_dataset_cap_keeps_most_recent():
    cfg = GbtConfig(dataset_cap=10)
    m = SurrogateModel(cfg)
    for i in range(25):
        m.observe(np.array([float(i)]), throughput=1e9 + i, subgraph_id="a")
    assert m.n_observed == 10
    exs = m.training_examples()
    kept = sorted(e.features[0] for e in exs)
    assert kept == [float(i) for i in range(15, 25)]


# -- ranking -----------------------------------------------------------------


def test_rank_scores_orders_by_score():
    m = SurrogateModel()
    rng = np.random.default_rng(9)
    X = rng.random((30, 2))
    exs = [TrainingExample(features=X[i], target=float(X[i, 0] * 0.9 + 0.05))
           for i in range(30)]
    m.fit_incremental(exs)
    entries = [entry(i, [x, 0.5]) for i, x in
               enumerate([0.1, 0.9, 0.5])]
    top = rank_scores(m, entries, 2)
    assert [e.order for e in top] == [1, 2]


def test_rank_scores_dedups_canonical():
    m = SurrogateModel()
    entries = [entry(0, [1.0], canonical="same"),
               entry(1, [1.0], canonical="same"),
               entry(2, [0.0], canonical="other")]
    top = rank_scores(m, entries, 2)
    assert [e.canonical for e in top] == ["same", "other"]


def test_rank_scores_tie_breaks_earlier_visit():
    m = SurrogateModel()  # everything scores 1.0
    entries = [entry(2, [0.2], canonical="c"), entry(0, [0.0], canonical="a"),
               entry(1, [0.1], canonical="b")]
    top = rank_scores(m, entries, 3)
    assert [e.order for e in top] == [0, 1, 2]


def test_rank_scores_excludes_measured():
    m = SurrogateModel()
    entries = [entry(0, [0.0]), entry(1, [1.0])]
    top = rank_scores(m, entries, 2, exclude={"s0"})
    assert [e.canonical for e in top] == ["s1"]


def test_rank_scores_short_heap_returns_all():
    m = SurrogateModel()
    entries = [entry(0, [0.0])]
    assert len(rank_scores(m, entries, 64)) == 1
