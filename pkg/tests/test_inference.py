import copy

import numpy as np
import pytest

from exflow.continual import UpdateConfig, til_update
from exflow.errors import ContractError, LabelSpaceError, StaleThresholdError, UnknownConditionError
from exflow.inference import (
    OutlierThreshold,
    calibrate_outlier,
    is_outlier,
    is_outlier_batch,
    label_posterior,
    label_posterior_batch,
    marginal_label_posterior,
    marginal_label_posterior_batch,
    marginal_log_density_batch,
    sample_task_features,
    task_posterior,
    task_posterior_batch,
)
from exflow.model import ContinualFlowModel

import pytest


def fresh_model(dim=4, seed=0, **kw):
    kw.setdefault("n_layers", 2)
    kw.setdefault("embed_width", 3)
    kw.setdefault("hidden", 8)
    return ContinualFlowModel(dim, base_seed=seed, **kw)


def blob_data(rng, n_per, centers, dim):
    xs, ys = [], []
    for label, c in centers.items():
        xs.append(c + rng.normal(size=(n_per, dim)))
        ys.append(np.full(n_per, label))
    return np.vstack(xs), np.concatenate(ys)


@pytest.fixture(scope="module")
def toy_model():
    """D=2 model trained on two well-separated blobs, one task."""
    m = fresh_model(dim=2, seed=100, n_layers=4, embed_width=4, hidden=16)
    rng = np.random.default_rng(100)
    xs, ys = blob_data(rng, 300, {1: 2.0, 2: -2.0}, 2)
    cfg = UpdateConfig(epochs=60, batch_size=32, pseudo_count=16)
    til_update(m, 1, xs, ys, cfg, np.random.default_rng(101))
    return m


@pytest.fixture(scope="module")
def two_task_model():
    """Shared label space {1, 2}; tasks differ in blob spread."""
    m = fresh_model(dim=2, seed=200, n_layers=4, embed_width=4, hidden=16)
    cfg = UpdateConfig(epochs=50, batch_size=32, pseudo_count=32)
    rng = np.random.default_rng(200)
    xs, ys = blob_data(rng, 250, {1: 1.5, 2: -1.5}, 2)
    til_update(m, 1, xs, ys, cfg, np.random.default_rng(201))
    xs2, ys2 = blob_data(rng, 250, {1: 4.0, 2: -4.0}, 2)
    til_update(m, 2, xs2, ys2, cfg, np.random.default_rng(202))
    return m


def test_label_posterior_symmetric_identity_flow():
    m = fresh_model()
    m.register_task(1, {1: 10, 2: 10})
    lp = label_posterior(m, 1, np.zeros(4))
    assert lp.labels == [1, 2]
    assert np.abs(lp.probs - 0.5).max() < 1e-12


def test_label_posterior_zero_prior_annihilates():
    m = fresh_model()
    m.register_task(1, {1: 10, 2: 10})
    m.tasks[1].label_counts = {1: 1, 2: 0}
    lp = label_posterior(m, 1, np.random.default_rng(0).normal(size=4))
    assert lp.probs[0] == 1.0
    assert lp.probs[1] == 0.0


def test_label_posterior_unknown_task():
    m = fresh_model()
    m.register_task(1, {1: 10})
    with pytest.raises(UnknownConditionError):
        label_posterior(m, 5, np.zeros(4))


def test_toy_blobs_heldout_accuracy(toy_model):
    rng = np.random.default_rng(111)
    xs, ys = blob_data(rng, 500, {1: 2.0, 2: -2.0}, 2)
    labels, probs = label_posterior_batch(toy_model, 1, xs)
    pred = np.asarray(labels)[probs.argmax(axis=1)]
    assert (pred == ys).mean() >= 0.99


def test_posteriors_sum_to_one(toy_model, two_task_model):
    rng = np.random.default_rng(1)
    xs = rng.normal(size=(50, 2)) * 3
    _, lp = label_posterior_batch(toy_model, 1, xs)
    assert np.abs(lp.sum(axis=1) - 1.0).max() < 1e-10
    _, tp = task_posterior_batch(two_task_model, xs)
    assert np.abs(tp.sum(axis=1) - 1.0).max() < 1e-10
    _, mp = marginal_label_posterior_batch(two_task_model, xs)
    assert np.abs(mp.sum(axis=1) - 1.0).max() < 1e-10


def test_prior_scaling_leaves_posteriors_unchanged(toy_model):
    m2 = copy.deepcopy(toy_model)
    m2.tasks[1].label_counts = {y: 7 * c for y, c in m2.tasks[1].label_counts.items()}
    rng = np.random.default_rng(2)
    xs = rng.normal(size=(40, 2)) * 3
    _, a = label_posterior_batch(toy_model, 1, xs)
    _, b = label_posterior_batch(m2, 1, xs)
    assert np.abs(a - b).max() < 1e-12
    _, ta = task_posterior_batch(toy_model, xs)
    _, tb = task_posterior_batch(m2, xs)
    assert np.abs(ta - tb).max() < 1e-12


def test_prior_monotonicity(toy_model):
    rng = np.random.default_rng(3)
    xs = rng.normal(size=(30, 2)) * 3
    _, before = label_posterior_batch(toy_model, 1, xs)
    m2 = copy.deepcopy(toy_model)
    m2.tasks[1].label_counts[1] *= 5
    _, after = label_posterior_batch(m2, 1, xs)
    assert (after[:, 0] >= before[:, 0] - 1e-12).all()


def test_task_posterior_single_task(toy_model):
    tp = task_posterior(toy_model, np.zeros(2))
    assert tp.task_ids == [1]
    assert tp.probs[0] == 1.0


def test_task_posterior_symmetric_tasks():
    m = fresh_model()
    m.register_task(1, {1: 10, 2: 10})
    m.register_task(2, {1: 10, 2: 10})
    tp = task_posterior(m, np.random.default_rng(4).normal(size=4))
    assert np.abs(tp.probs - 0.5).max() < 1e-10


def test_task_posterior_prior_validation(two_task_model):
    x = np.zeros(2)
    with pytest.raises(ContractError):
        task_posterior(two_task_model, x, task_prior=[1.0])
    with pytest.raises(ContractError):
        task_posterior(two_task_model, x, task_prior=[0.8, 0.4])
    with pytest.raises(ContractError):
        task_posterior(two_task_model, x, task_prior=[1.2, -0.2])


def test_marginal_single_task_equals_label_posterior(toy_model):
    x = np.array([1.0, 2.0])
    labels, mix = marginal_label_posterior(toy_model, x)
    lp = label_posterior(toy_model, 1, x)
    assert labels == lp.labels
    assert np.abs(mix - lp.probs).max() < 1e-12


def test_marginal_degenerate_task_prior(two_task_model):
    x = np.array([1.5, -0.5])
    labels, mix = marginal_label_posterior(two_task_model, x, task_prior=[0.0, 1.0])
    lp = label_posterior(two_task_model, 2, x)
    assert np.abs(mix - lp.probs).max() < 1e-12


def test_marginal_requires_shared_labels():
    m = fresh_model()
    m.register_task(1, {1: 10, 2: 10})
    m.register_task(2, {1: 10, 3: 10})
    with pytest.raises(LabelSpaceError):
        marginal_label_posterior(m, np.zeros(4))


def test_marginal_recovers_argmax_across_tasks(two_task_model):
    rng = np.random.default_rng(5)
    for centers in ({1: 1.5, 2: -1.5}, {1: 4.0, 2: -4.0}):
        xs, ys = blob_data(rng, 200, centers, 2)
        labels, mix = marginal_label_posterior_batch(two_task_model, xs)
        pred = np.asarray(labels)[mix.argmax(axis=1)]
        assert (pred == ys).mean() >= 0.95, centers


def test_task_identity_on_separable_tasks(two_task_model):
    # tight blobs belong to task 1, wide ones to task 2
    rng = np.random.default_rng(6)
    xs1, _ = blob_data(rng, 200, {1: 1.5, 2: -1.5}, 2)
    ids, tp = task_posterior_batch(two_task_model, xs1)
    pred = np.asarray(ids)[tp.argmax(axis=1)]
    assert (pred == 1).mean() >= 0.8
    xs2, _ = blob_data(rng, 200, {1: 4.0, 2: -4.0}, 2)
    ids, tp = task_posterior_batch(two_task_model, xs2)
    pred = np.asarray(ids)[tp.argmax(axis=1)]
    assert (pred == 2).mean() >= 0.8


def test_batch_matches_single(toy_model):
    rng = np.random.default_rng(7)
    xs = rng.normal(size=(5, 2))
    _, batch = label_posterior_batch(toy_model, 1, xs)
    for i in range(5):
        lp = label_posterior(toy_model, 1, xs[i])
        assert np.abs(batch[i] - lp.probs).max() < 1e-12


def test_calibrate_level_validation(toy_model):
    rng = np.random.default_rng(8)
    with pytest.raises(ContractError):
        calibrate_outlier(toy_model, 1, 1.0, 10, rng)
    with pytest.raises(ContractError):
        calibrate_outlier(toy_model, 1, -0.1, 10, rng)
    with pytest.raises(ContractError):
        calibrate_outlier(toy_model, 1, 0.1, 0, rng)


def test_calibrate_zero_level_gives_minimum(toy_model):
    rng = np.random.default_rng(9)
    thr = calibrate_outlier(toy_model, 1, 0.0, 200, rng)
    xs, _ = sample_task_features(toy_model, 1, 200, np.random.default_rng(9))
    dens = marginal_log_density_batch(toy_model, 1, xs)
    assert thr.threshold == dens.min()


def test_calibrate_single_point_threshold_is_its_density(toy_model):
    thr = calibrate_outlier(toy_model, 1, 0.3, 1, np.random.default_rng(10))
    xs, _ = sample_task_features(toy_model, 1, 1, np.random.default_rng(10))
    dens = marginal_log_density_batch(toy_model, 1, xs)
    assert thr.threshold == dens[0]


def test_outlier_coverage(toy_model):
    thr = calibrate_outlier(toy_model, 1, 0.1, 2000, np.random.default_rng(11))
    xs, _ = sample_task_features(toy_model, 1, 2000, np.random.default_rng(12))
    flags, _ = is_outlier_batch(toy_model, thr, xs)
    assert 0.05 <= flags.mean() <= 0.15


def test_far_outliers_flagged(toy_model):
    thr = calibrate_outlier(toy_model, 1, 0.05, 2000, np.random.default_rng(13))
    rng = np.random.default_rng(14)
    far = 20.0 + rng.normal(size=(200, 2))  # ~10 sd beyond either blob
    flags, dens = is_outlier_batch(toy_model, thr, far)
    assert flags.mean() >= 0.95
    assert np.isfinite(dens).all()


def test_inlier_above_threshold_not_flagged(toy_model):
    thr = calibrate_outlier(toy_model, 1, 0.1, 500, np.random.default_rng(15))
    xs, _ = sample_task_features(toy_model, 1, 500, np.random.default_rng(15))
    dens = marginal_log_density_batch(toy_model, 1, xs)
    best = xs[int(np.argmax(dens))]
    flag, _ = is_outlier(toy_model, thr, best)
    assert flag is False


def test_outlier_tie_flags(toy_model):
    x = np.array([0.5, 0.5])
    dens = marginal_log_density_batch(toy_model, 1, x[None, :])[0]
    thr = OutlierThreshold(1, 0.1, dens, 100, toy_model.revision)
    flag, got = is_outlier(toy_model, thr, x)
    assert flag is True
    assert got == dens


def test_stale_threshold_rejected(toy_model):
    m = copy.deepcopy(toy_model)
    thr = calibrate_outlier(m, 1, 0.1, 100, np.random.default_rng(16))
    m.finalize_task_state(1, np.zeros((1, 2)), np.array([1]))
    with pytest.raises(StaleThresholdError):
        is_outlier(m, thr, np.zeros(2))
