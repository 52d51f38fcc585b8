"""Incremental updates: learn a new task or new classes without old data.

Both update paths share one shape: freeze a deep copy of the current
model, generate pseudo data from that copy for every task it knows, then
optimize a three-term loss on the live model:

  new-data NLL  +  alpha1 * replay NLL  +  alpha2 * inverse-map anchor

The replay term scores the pseudo features under the NEW flow but against
the SNAPSHOT's latent parameters and stored states, pulling the updated
flow toward mapping old-task data the way the old model did. The anchor
term pins the new flow's generation direction to the old one's outputs at
the sampled latents. With no previous tasks both terms vanish and the
task update reduces to learning from scratch.

Task updates train the shared flow plus the new task's latent parameters;
class updates train the flow only, score the new batch conditionally on
the task's stored state, and absorb that batch into the state afterward.
"""

from __future__ import annotations

import copy

import numpy as np

from exflow import autodiff as ad
from exflow.autodiff import Tape, Tensor, backward
from exflow.errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
)
from exflow.latent import LatentState, conditional_log_density, sample_predictive
from exflow.optim import Adam


class ModelSnapshot:
    """Deep frozen copy of a model taken before an update begins."""

    def __init__(self, model):
        self.model = copy.deepcopy(model)

    def task_ids(self):
        return self.model.task_ids()

    def record(self, t):
        return self.model.record(t)


class PseudoDataset:
    """Draws standing in for one task's vanished training data."""

    __slots__ = ("task_id", "latents", "labels", "features")

    def __init__(self, task_id, latents, labels, features):
        self.task_id = int(task_id)
        self.latents = latents
        self.labels = labels
        self.features = features

    def __len__(self):
        return self.labels.shape[0]


class UpdateConfig:
    """Training controls for one incremental update.

    ``epochs`` is a cap, not a promise: when ``patience`` is positive a
    slice of the incoming batch is held out, its conditional NLL is
    tracked every epoch, and training stops once that score has not
    improved for ``patience`` epochs, restoring the best parameters
    seen. The flow has enough capacity to memorize a small batch, which
    silently wrecks density calibration long before the training loss
    flattens; the held-out score turns upward right where that starts.
    """

    def __init__(self, alpha1=1.0, alpha2=1.0, pseudo_count=128, epochs=200,
                 batch_size=64, lr=1e-3, resample_each_step=True, patience=10):
        if alpha1 < 0 or alpha2 < 0:
            raise ConfigError("regularizer weights must be non-negative")
        if pseudo_count < 1:
            raise ConfigError("pseudo_count must be at least 1")
        if epochs < 0 or batch_size < 1 or lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1, lr > 0 required")
        if patience < 0:
            raise ConfigError("patience must be >= 0 (0 disables early stop)")
        self.alpha1 = float(alpha1)
        self.alpha2 = float(alpha2)
        self.pseudo_count = int(pseudo_count)
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.lr = float(lr)
        self.resample_each_step = bool(resample_each_step)
        self.patience = int(patience)

    @classmethod
    def for_model(cls, model, **overrides):
        base = dict(alpha1=model.replay_weight, alpha2=model.functional_weight,
                    pseudo_count=model.pseudo_count)
        base.update(overrides)
        return cls(**base)


def generate_pseudo(snapshot: ModelSnapshot, t: int, n: int, rng) -> PseudoDataset:
    """Sample n (latent, label, feature) triples from a snapshot task.

    Labels come i.i.d. from the stored empirical prior, latents i.i.d.
    from the task's latent predictive at its stored state, and features
    from the snapshot flow's generation direction.
    """
    rec = snapshot.record(t)
    labels, probs = rec.prior()
    ys = rng.choice(np.asarray(labels), size=n, p=probs)
    zs = sample_predictive(rec.latent, rec.state, rng, size=n)
    xs = snapshot.model.flow.inverse(zs, t, ys).data
    return PseudoDataset(t, zs, ys, xs)


def generate_all_pseudo(snapshot: ModelSnapshot, n: int, rng):
    return [generate_pseudo(snapshot, t, n, rng) for t in snapshot.task_ids()]


def replay_nll(model, snapshot: ModelSnapshot, pseudo_sets):
    """NLL of pseudo features under the new flow and the old latent law.

    Each pseudo feature is pushed through the LIVE flow, then scored
    against the SNAPSHOT's per-task predictive at the stored state (the
    snapshot's parameters act as constants; they are not in any
    optimizer). Differentiable w.r.t. the live flow weights. Returns a
    scalar Tensor.
    """
    total = None
    for ps in pseudo_sets:
        z, log_det = model.flow.forward(ps.features, ps.task_id, ps.labels)
        rec = snapshot.record(ps.task_id)
        rows = conditional_log_density(rec.latent, rec.state, z)
        term = ad.mul_scalar(ad.add(ad.sum_all(rows), ad.sum_all(log_det)), -1.0)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ContractError("replay_nll needs at least one pseudo dataset")
    return total


def functional_reg(model, pseudo_sets):
    """Squared distance between new-flow generations and stored features.

    Anchors the generation direction: sum over triples of
    ||inverse(latent) - feature||^2 under the live flow. Returns a scalar
    Tensor differentiable w.r.t. the flow weights.
    """
    total = None
    for ps in pseudo_sets:
        x_new = model.flow.inverse(ps.latents, ps.task_id, ps.labels)
        diff = ad.sub(x_new, Tensor(ps.features))
        term = ad.sum_all(ad.mul(diff, diff))
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ContractError("functional_reg needs at least one pseudo dataset")
    return total


def _check_batch(model, xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys)
    if xs.ndim != 2 or xs.shape[1] != model.dim:
        raise DimensionError(
            f"data shape {xs.shape} does not match model dimension {model.dim}"
        )
    if ys.shape != (xs.shape[0],):
        raise DimensionError("labels must be one integer per row")
    return xs, ys.astype(int)


def _counts(ys):
    vals, counts = np.unique(ys, return_counts=True)
    return {int(v): int(c) for v, c in zip(vals, counts)}


# Held-out slice used by early stopping: fraction of the incoming batch,
# only when the batch is big enough for the split to mean anything.
_VAL_FRACTION = 0.1
_MIN_ROWS_FOR_VAL = 20


def _heldout_nll(model, task_id, xs_tr, ys_tr, xs_val, ys_val, base_state):
    """Per-row NLL of the held-out rows, conditioned on the train rows.

    Mirrors how the model is used after the update: the train slice is
    absorbed (under the current flow) on top of the inherited state, and
    the held-out rows are scored against the result.
    """
    if base_state is None:
        base_state = LatentState.empty(model.dim)
    z, _ = model.flow.forward(xs_tr, task_id, ys_tr)
    state = base_state.absorb_batch(z.data)
    nll = model.task_nll(task_id, xs_val, ys_val, initial_state=state)
    return nll.item() / xs_val.shape[0]


def _run_training(model, snapshot, params, cfg, rng, xs, ys, task_id, initial_state):
    """Shared minibatch loop for both update paths. Returns epoch metrics."""
    opt = Adam(params, lr=cfg.lr)
    has_history = bool(snapshot.task_ids())
    pseudo_sets = None
    if has_history and not cfg.resample_each_step:
        pseudo_sets = generate_all_pseudo(snapshot, cfg.pseudo_count, rng)

    n = xs.shape[0]
    use_val = cfg.patience > 0 and n >= _MIN_ROWS_FOR_VAL
    if use_val:
        split = rng.permutation(n)
        n_val = max(2, int(round(_VAL_FRACTION * n)))
        xs_val, ys_val = xs[split[:n_val]], ys[split[:n_val]]
        xs, ys = xs[split[n_val:]], ys[split[n_val:]]
        n = xs.shape[0]
        best_val = np.inf
        best_epoch = -1
        best_params = None

    metrics = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if has_history and cfg.resample_each_step:
                pseudo_sets = generate_all_pseudo(snapshot, cfg.pseudo_count, rng)
            opt.zero_grad()
            with Tape() as tape:
                nll = model.task_nll(task_id, xs[idx], ys[idx],
                                     initial_state=initial_state)
                loss = nll
                rep_v = fun_v = 0.0
                if has_history and cfg.alpha1 > 0.0:
                    rep = replay_nll(model, snapshot, pseudo_sets)
                    loss = ad.add(loss, ad.mul_scalar(rep, cfg.alpha1))
                    rep_v = rep.item()
                if has_history and cfg.alpha2 > 0.0:
                    fun = functional_reg(model, pseudo_sets)
                    loss = ad.add(loss, ad.mul_scalar(fun, cfg.alpha2))
                    fun_v = fun.item()
            if not np.isfinite(loss.item()):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {steps}"
                )
            backward(tape, loss)
            opt.step()
            sums += (loss.item(), nll.item(), rep_v, fun_v)
            steps += 1
        avg = sums / max(steps, 1)
        row = {
            "epoch": epoch,
            "total": avg[0],
            "nll": avg[1],
            "replay": avg[2],
            "functional": avg[3],
        }
        stop = False
        if use_val:
            val = _heldout_nll(model, task_id, xs, ys, xs_val, ys_val,
                               initial_state)
            row["val"] = val
            if val < best_val:
                best_val = val
                best_epoch = epoch
                best_params = [p.data.copy() for p in params]
            else:
                stop = epoch - best_epoch >= cfg.patience
        metrics.append(row)
        if stop:
            break
    if use_val and best_params is not None:
        for p, data in zip(params, best_params):
            p.data[:] = data
    return metrics


def til_update(model, t, xs, ys, cfg: UpdateConfig, rng):
    """Add task t from its data; previous tasks survive via pseudo replay.

    Trains the shared flow plus the new task's latent parameters. The new
    batch is scored from the empty state (from-scratch semantics for the
    new task). Returns per-epoch metrics.
    """
    t = int(t)
    xs, ys = _check_batch(model, xs, ys)
    if xs.shape[0] == 0:
        raise ContractError("task update needs a non-empty dataset")
    if t in model.tasks:
        raise ContractError(f"task {t} is already registered; use the class update")
    snapshot = ModelSnapshot(model)
    model.register_task(t, _counts(ys))
    params = model.flow_parameters() + model.latent_parameters(t)
    metrics = _run_training(model, snapshot, params, cfg, rng, xs, ys,
                            task_id=t, initial_state=None)
    model.finalize_task_state(t, xs, ys)
    return metrics


def cil_update(model, t, xs, ys, cfg: UpdateConfig, rng):
    """Extend known task t with disjoint new classes, without its old data.

    The task's latent parameters stay frozen; only the flow moves. The
    new batch is scored conditionally on the task's stored state, and is
    absorbed into that state once training finishes. Returns per-epoch
    metrics.
    """
    t = int(t)
    xs, ys = _check_batch(model, xs, ys)
    model.record(t)
    if xs.shape[0] == 0:
        return []
    snapshot = ModelSnapshot(model)
    model.register_task(t, _counts(ys))  # rejects overlapping labels
    base_state = model.tasks[t].state
    params = model.flow_parameters()
    metrics = _run_training(model, snapshot, params, cfg, rng, xs, ys,
                            task_id=t, initial_state=base_state)
    model.finalize_task_state(t, xs, ys)
    return metrics
