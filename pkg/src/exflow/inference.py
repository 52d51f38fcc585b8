"""Label, task-identity, and outlier inference on a frozen model.

Everything is scored in the log domain. The per-(task, label) joint of a
point x is

    log p(z | stored state) + log |det dz/dx| + log prior(label | task)

with z = forward(x; task, label). Label posteriors normalize that over
labels within a task; task posteriors add a task prior and marginalize
labels with one log-sum-exp; the label-marginal density (no task prior,
unnormalized) is what the outlier level set thresholds.

All operations are pure given a frozen model, so any number of callers
may run them concurrently.
"""

from __future__ import annotations

import numpy as np

from exflow.errors import ContractError, StaleThresholdError
from exflow.latent import conditional_log_density, sample_predictive


def _logsumexp(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(a - safe).sum(axis=axis)) + np.squeeze(safe, axis=axis)
    collapsed = np.squeeze(m, axis=axis)
    return np.where(np.isfinite(collapsed), out, collapsed)


def _softmax_rows(scores):
    m = np.max(scores, axis=1, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(scores - safe)
    return e / e.sum(axis=1, keepdims=True)


class LabelPosterior:
    """Per-class posterior for one point under one task."""

    def __init__(self, task_id, labels, log_scores, probs):
        self.task_id = task_id
        self.labels = list(labels)
        self.log_scores = np.asarray(log_scores)
        self.probs = np.asarray(probs)

    def argmax(self):
        """Most probable label; ties go to the lowest class index."""
        return self.labels[int(np.argmax(self.probs))]


class TaskPosterior:
    """Posterior over which task a point came from."""

    def __init__(self, task_ids, log_scores, probs):
        self.task_ids = list(task_ids)
        self.log_scores = np.asarray(log_scores)
        self.probs = np.asarray(probs)

    def argmax(self):
        return self.task_ids[int(np.argmax(self.probs))]


class OutlierThreshold:
    """Empirical level-set cut for one task's label-marginal log density."""

    def __init__(self, task_id, level, threshold, n_calib, model_revision):
        self.task_id = task_id
        self.level = float(level)
        self.threshold = float(threshold)
        self.n_calib = int(n_calib)
        self.model_revision = int(model_revision)


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ContractError(f"point shape {x.shape} does not match model dimension {model.dim}")
    return x


def label_scores_batch(model, t, xs):
    """(sorted labels, [n, C] per-class log joints) for a batch."""
    rec = model.record(t)
    labels, prior = rec.prior()
    xs = _as_batch(model, xs)
    n = xs.shape[0]
    scores = np.empty((n, len(labels)))
    with np.errstate(divide="ignore"):
        log_prior = np.log(prior)
    for c, y in enumerate(labels):
        z, log_det = model.latent_batch(t, xs, np.full(n, y))
        rows = conditional_log_density(rec.latent, rec.state, z)
        scores[:, c] = rows + log_det + log_prior[c]
    return labels, scores


def label_posterior_batch(model, t, xs):
    labels, scores = label_scores_batch(model, t, xs)
    return labels, _softmax_rows(scores)


def label_posterior(model, t, x) -> LabelPosterior:
    """Posterior over task t's classes for a single point."""
    labels, scores = label_scores_batch(model, t, x)
    return LabelPosterior(int(t), labels, scores[0], _softmax_rows(scores)[0])


def _check_task_prior(model, task_prior):
    ids = model.task_ids()
    if not ids:
        raise ContractError("model has no tasks")
    if task_prior is None:
        return ids, np.full(len(ids), 1.0 / len(ids))
    p = np.asarray(task_prior, dtype=np.float64)
    if p.shape != (len(ids),):
        raise ContractError(f"task prior must have {len(ids)} entries, got shape {p.shape}")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-8:
        raise ContractError("task prior must be non-negative and sum to 1")
    return ids, p


def task_scores_batch(model, xs, task_prior=None):
    """(task ids, [n, T] log scores): log p(t) + label-marginal log density."""
    ids, prior = _check_task_prior(model, task_prior)
    xs = _as_batch(model, xs)
    scores = np.empty((xs.shape[0], len(ids)))
    with np.errstate(divide="ignore"):
        log_prior = np.log(prior)
    for j, t in enumerate(ids):
        _, per_label = label_scores_batch(model, t, xs)
        scores[:, j] = _logsumexp(per_label, axis=1) + log_prior[j]
    return ids, scores


def task_posterior_batch(model, xs, task_prior=None):
    ids, scores = task_scores_batch(model, xs, task_prior)
    return ids, _softmax_rows(scores)


def task_posterior(model, x, task_prior=None) -> TaskPosterior:
    """Posterior over tasks for a single point."""
    ids, scores = task_scores_batch(model, x, task_prior)
    return TaskPosterior(ids, scores[0], _softmax_rows(scores)[0])


def marginal_label_posterior_batch(model, xs, task_prior=None):
    """Label posterior with task identity marginalized out.

    Requires every task to carry the same label set; the result rows are
    sum_t p(label | task t, x) * p(task t | x).
    """
    labels = model.shared_label_space()
    ids, task_probs = task_posterior_batch(model, xs, task_prior)
    xs = _as_batch(model, xs)
    mix = np.zeros((xs.shape[0], len(labels)))
    for j, t in enumerate(ids):
        got_labels, probs = label_posterior_batch(model, t, xs)
        assert got_labels == labels
        mix += probs * task_probs[:, j:j + 1]
    return labels, mix


def marginal_label_posterior(model, x, task_prior=None):
    labels, mix = marginal_label_posterior_batch(model, x, task_prior)
    return labels, mix[0]


def marginal_log_density_batch(model, t, xs):
    """Label-marginal log predictive density of each row under task t."""
    _, scores = label_scores_batch(model, t, xs)
    return _logsumexp(scores, axis=1)


def sample_task_features(model, t, n, rng):
    """Draw n (feature, label) pairs from the model's view of task t."""
    rec = model.record(t)
    labels, prior = rec.prior()
    ys = rng.choice(np.asarray(labels), size=n, p=prior)
    zs = sample_predictive(rec.latent, rec.state, rng, size=n)
    xs = model.flow.inverse(zs, t, ys).data
    return xs, ys


def calibrate_outlier(model, t, level, n_calib, rng) -> OutlierThreshold:
    """Empirical level-alpha cut of task t's own density values.

    Samples n_calib points from the model's generative view of the task,
    scores their label-marginal log density, and stores the empirical
    alpha-quantile (level 0 degenerates to the sample minimum). Points at
    or below the cut are flagged by is_outlier.
    """
    if not 0.0 <= level < 1.0:
        raise ContractError(f"outlier level must be in [0, 1), got {level}")
    if n_calib < 1:
        raise ContractError("n_calib must be positive")
    xs, _ = sample_task_features(model, t, n_calib, rng)
    dens = marginal_log_density_batch(model, t, xs)
    threshold = float(np.quantile(dens, level))
    return OutlierThreshold(int(t), level, threshold, n_calib, model.revision)


def is_outlier_batch(model, threshold: OutlierThreshold, xs):
    """(flags, log densities) for a batch; flag means density <= cut."""
    if threshold.model_revision != model.revision:
        raise StaleThresholdError(
            f"threshold calibrated at model revision {threshold.model_revision}, "
            f"model is now at {model.revision}; recalibrate"
        )
    dens = marginal_log_density_batch(model, threshold.task_id, xs)
    return dens <= threshold.threshold, dens


def is_outlier(model, threshold: OutlierThreshold, x):
    flags, dens = is_outlier_batch(model, threshold, x)
    return bool(flags[0]), float(dens[0])
