"""Synthetic continual-learning benchmark harness.

Five incremental steps over four synthetic tasks (task t has t + 1
classes): train task 1 from scratch, add tasks 2 and 3 whole, then feed
task 4 in two class batches (labels {1, 2, 3}, then {4, 5}). After every
step each seen task's test set is scored for label accuracy and task
identification accuracy, restricted to rows whose labels the model has
been shown, which yields the retention curve that the forgetting bound
is read from.
"""

from __future__ import annotations

import numpy as np

from exflow.config import RunConfig
from exflow.continual import UpdateConfig, cil_update, til_update
from exflow.data import Dataset, SyntheticSpec, generate_synthetic
from exflow.inference import label_posterior_batch, task_posterior_batch
from exflow.model import ContinualFlowModel

N_TASKS = 4
FIRST_CIL_LABELS = (1, 2, 3)


class StepOutcome:
    """One training step: what was trained and how every task scored."""

    __slots__ = ("step", "task_id", "kind", "metrics", "rows")

    def __init__(self, step, task_id, kind, metrics, rows):
        self.step = step
        self.task_id = task_id
        self.kind = kind
        self.metrics = metrics
        self.rows = rows  # [(task, n_eval, accuracy, task_id_accuracy)]


class BenchmarkResult:
    __slots__ = ("model", "steps", "tests")

    def __init__(self, model, steps, tests):
        self.model = model
        self.steps = steps
        self.tests = tests

    def curve(self):
        """(step, task, accuracy, task_id_accuracy) rows, CSV order."""
        out = []
        for s in self.steps:
            for task, _, acc, tacc in s.rows:
                out.append((s.step, task, acc, tacc))
        return out

    def accuracy_at(self, step, task):
        for s in self.steps:
            if s.step == step:
                for t, _, acc, _ in s.rows:
                    if t == task:
                        return acc
        raise KeyError((step, task))

    def intro_step(self, task):
        for s in self.steps:
            if s.task_id == task:
                return s.step
        raise KeyError(task)

    def forgetting(self):
        """Per task: accuracy at its introducing step minus final accuracy."""
        final = self.steps[-1].step
        out = {}
        for t in sorted({s.task_id for s in self.steps}):
            out[t] = self.accuracy_at(self.intro_step(t), t) - self.accuracy_at(final, t)
        return out

    def summary(self):
        last = self.steps[-1]
        worst_acc = min(acc for _, _, acc, _ in last.rows)
        worst_tacc = min(tacc for _, _, _, tacc in last.rows)
        return {
            "steps": len(self.steps),
            "worst_accuracy": worst_acc,
            "worst_task_id_accuracy": worst_tacc,
            "max_misclassification": 1.0 - worst_acc,
            "max_task_id_misclassification": 1.0 - worst_tacc,
            "max_forgetting": max(self.forgetting().values()),
        }


def _subset(ds: Dataset, keep_labels) -> Dataset:
    mask = np.isin(ds.labels, list(keep_labels))
    return Dataset(ds.features[mask], ds.labels[mask], task_id=ds.task_id,
                   note=ds.note)


def evaluate_task(model, t, test: Dataset):
    """(n_eval, label accuracy, task-id accuracy) on rows with seen labels."""
    seen = model.record(t).labels()
    sub = _subset(test, seen)
    labels, probs = label_posterior_batch(model, t, sub.features)
    pred = np.asarray(labels)[probs.argmax(axis=1)]
    acc = float(np.mean(pred == sub.labels))
    ids, tprobs = task_posterior_batch(model, sub.features)
    tpred = np.asarray(ids)[tprobs.argmax(axis=1)]
    tacc = float(np.mean(tpred == t))
    return len(sub), acc, tacc


def _step_rng(seed, step):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(10, step)))


def run_benchmark(cfg: RunConfig, ablation=False, n_steps=5, progress=None):
    """Run up to the full five-step schedule and score every step.

    ablation=True zeroes both regularizer weights (same data, same seeds)
    so retention with and without generative replay can be compared.
    n_steps < 5 truncates the schedule, which keeps the ablation cheap:
    the forgetting signature is already visible after step 2.
    """
    if not 1 <= n_steps <= 5:
        raise ValueError("n_steps must be in 1..5")
    spec = SyntheticSpec(cfg.dim, N_TASKS, cfg.task_size,
                         noise_var=cfg.noise_var, seed=cfg.seed,
                         test_size=cfg.test_size)
    trains, tests = generate_synthetic(spec)
    alpha1 = 0.0 if ablation else cfg.alpha1
    alpha2 = 0.0 if ablation else cfg.alpha2
    model = ContinualFlowModel(
        cfg.dim, n_layers=cfg.layers, embed_width=cfg.embed_width,
        pseudo_count=cfg.pseudo_count, replay_weight=alpha1,
        functional_weight=alpha2, base_seed=cfg.seed, hidden=cfg.hidden,
    )
    upd = UpdateConfig.for_model(
        model, epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
        resample_each_step=cfg.resample_pseudo, patience=cfg.patience,
    )

    schedule = [
        ("init", 1, trains[0]),
        ("til", 2, trains[1]),
        ("til", 3, trains[2]),
        ("cil", 4, _subset(trains[3], FIRST_CIL_LABELS)),
        ("cil", 4, _subset(trains[3], set(range(1, N_TASKS + 2)) - set(FIRST_CIL_LABELS))),
    ]
    steps = []
    for step, (kind, t, ds) in enumerate(schedule[:n_steps], start=1):
        rng = _step_rng(cfg.seed, step)
        if kind == "cil" and t in model.task_ids():
            metrics = cil_update(model, t, ds.features, ds.labels, upd, rng)
        else:
            metrics = til_update(model, t, ds.features, ds.labels, upd, rng)
        rows = []
        for seen_t in model.task_ids():
            n_eval, acc, tacc = evaluate_task(model, seen_t, tests[seen_t - 1])
            rows.append((seen_t, n_eval, acc, tacc))
        outcome = StepOutcome(step, t, kind, metrics, rows)
        steps.append(outcome)
        if progress is not None:
            progress(outcome)
    return BenchmarkResult(model, steps, tests)
