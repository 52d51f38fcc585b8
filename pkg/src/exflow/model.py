"""Task registry plus the sequence negative log-likelihood.

A model is one shared conditional flow and, per task, a label prior
(empirical class proportions), that task's latent parameters, and the
sufficient statistics of every latent vector absorbed for it so far.

The core quantity is ``task_nll``: map a batch through the flow under its
(task, label) conditions, score the resulting rows as one exchangeable
sequence threaded from an initial state, add the per-row log-dets, and
negate. With the empty initial state that is the from-scratch training
objective; threaded from a stored state it is the likelihood of new data
given everything the task has already absorbed.
"""

from __future__ import annotations

import numpy as np

from exflow import autodiff as ad
from exflow.autodiff import Tensor
from exflow.errors import ContractError, LabelSpaceError, UnknownConditionError
from exflow.flow import ConditionalFlow
from exflow.latent import LatentParams, LatentState, sequence_log_density

# spawn-key purposes for seed derivation; frozen, order matters for replay
_SEED_FLOW_INIT = 0
_SEED_TASK_EMBED = 1
_SEED_LABEL_EMBED = 2


class TaskRecord:
    """Everything the model remembers about one task."""

    def __init__(self, task_id: int, dim: int):
        self.task_id = task_id
        self.label_counts = {}
        self.latent = LatentParams(f"task{task_id}.latent", dim)
        self.state = LatentState.empty(dim)

    def labels(self):
        return sorted(self.label_counts)

    def prior(self):
        """(sorted labels, empirical probabilities summing to 1)."""
        labels = self.labels()
        counts = np.array([self.label_counts[y] for y in labels], dtype=np.float64)
        return labels, counts / counts.sum()


class ContinualFlowModel:
    """Conditional flow + per-task exchangeable latents, grown task by task."""

    def __init__(self, dim, n_layers=6, embed_width=16, pseudo_count=128,
                 replay_weight=1.0, functional_weight=1.0, base_seed=0, hidden=None):
        if dim < 2:
            raise ContractError("data dimension must be at least 2")
        self.dim = dim
        self.n_layers = n_layers
        self.embed_width = embed_width
        self.pseudo_count = int(pseudo_count)
        self.replay_weight = float(replay_weight)
        self.functional_weight = float(functional_weight)
        self.base_seed = int(base_seed)
        self.hidden = max(64, dim) if hidden is None else int(hidden)
        self.flow = ConditionalFlow(
            dim, n_layers, embed_width,
            self._seeded_rng(_SEED_FLOW_INIT), hidden=self.hidden,
        )
        self.tasks = {}
        # bumped on any mutation; lets calibrated artifacts detect staleness
        self.revision = 0

    def _seeded_rng(self, *key):
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.base_seed, spawn_key=tuple(key))
        )

    def _embed_seed_fn(self, t, y=None):
        if y is None:
            return self._seeded_rng(_SEED_TASK_EMBED, t)
        return self._seeded_rng(_SEED_LABEL_EMBED, t, y)

    # ------------------------------------------------------------------
    # registry

    def task_ids(self):
        return sorted(self.tasks)

    def record(self, t: int) -> TaskRecord:
        rec = self.tasks.get(int(t))
        if rec is None:
            raise UnknownConditionError(f"task {t} is not registered")
        return rec

    def register_task(self, t: int, label_counts: dict) -> TaskRecord:
        """Create a task, or extend a known one with disjoint new labels.

        The prior is the empirical proportion of the (merged) counts. On
        the extension path the task's latent parameters and existing
        label embeddings are left untouched.
        """
        t = int(t)
        label_counts = {int(y): int(c) for y, c in label_counts.items()}
        if not label_counts:
            raise ContractError("register_task needs at least one label count")
        for y, c in label_counts.items():
            if c <= 0:
                raise ContractError(f"label {y} has non-positive count {c}")
        rec = self.tasks.get(t)
        if rec is None:
            rec = TaskRecord(t, self.dim)
            rec.label_counts = dict(label_counts)
            self.tasks[t] = rec
        else:
            overlap = set(rec.label_counts) & set(label_counts)
            if overlap:
                raise LabelSpaceError(
                    f"labels {sorted(overlap)} already registered for task {t}; "
                    "incremental class extension requires disjoint labels"
                )
            rec.label_counts.update(label_counts)
        self.flow.add_condition(t, label_counts.keys(), self._embed_seed_fn)
        self.revision += 1
        return rec

    # ------------------------------------------------------------------
    # likelihood

    def task_nll(self, t, xs, y_ids, initial_state=None):
        """Negative log-likelihood of an ordered batch as one sequence.

        Returns a scalar Tensor; differentiable when computed under an
        active tape. ``initial_state`` defaults to the empty state
        (from-scratch semantics); pass the stored state to score new data
        conditionally on what the task has absorbed.
        """
        rec = self.record(t)
        if initial_state is None:
            initial_state = LatentState.empty(self.dim)
        z, log_det = self.flow.forward(xs, int(t), y_ids)
        seq_ld = sequence_log_density(rec.latent, initial_state, z)
        return ad.mul_scalar(ad.add(seq_ld, ad.sum_all(log_det)), -1.0)

    def latent_batch(self, t, xs, y_ids):
        """Latent rows and per-row log-dets for a batch, as plain arrays."""
        z, log_det = self.flow.forward(xs, int(t), y_ids)
        return z.data, log_det.data

    def finalize_task_state(self, t, xs, y_ids) -> None:
        """Absorb the batch's latents (under the current flow) into task t."""
        rec = self.record(t)
        z, _ = self.flow.forward(xs, int(t), y_ids)
        rec.state = rec.state.absorb_batch(z.data)
        self.revision += 1

    # ------------------------------------------------------------------
    # parameter enumeration

    def flow_parameters(self):
        return self.flow.parameters()

    def latent_parameters(self, t):
        return self.record(t).latent.parameters()

    def parameters(self):
        out = self.flow.parameters()
        for t in self.task_ids():
            out += self.tasks[t].latent.parameters()
        return out

    def shared_label_space(self):
        """The common label set when every task shares one; error otherwise."""
        ids = self.task_ids()
        if not ids:
            raise ContractError("model has no tasks")
        first = self.tasks[ids[0]].labels()
        for t in ids[1:]:
            if self.tasks[t].labels() != first:
                raise LabelSpaceError(
                    "tasks do not share a label space: "
                    f"task {ids[0]} has {first}, task {t} has {self.tasks[t].labels()}"
                )
        return first
