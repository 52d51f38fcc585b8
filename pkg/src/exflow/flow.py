"""Conditional coupling bijection between data space and latent space.

A stack of coupling layers, each leaving one half of the coordinates
untouched and applying an elementwise affine map to the other half. The
shift and log-scale come from small dense networks that read the
untouched half concatenated with a task embedding and a label embedding,
which is how one set of weights serves every (task, label) pair.

Direction convention: ``forward`` maps data to latent space and reports
the log |det Jacobian| of that pass; ``inverse`` maps latent draws back
to data space (generation). Layer k computes out = shift + scale * in on
its active half, so the forward log-det is just the sum of log-scales.

The scale is exp(tanh(pre)) : bounded away from 0 and infinity for
any network output, so the layer is invertible for all inputs, and the
zero-initialized final layers make the whole flow start as the identity
with log-det exactly 0.
"""

from __future__ import annotations

import numpy as np

from exflow import autodiff as ad
from exflow.autodiff import Parameter, Tensor
from exflow.errors import DimensionError, UnknownConditionError

SCALE_BOUND = 1.0
EMBED_INIT_SD = 0.1


class Mlp:
    """Two-hidden-layer tanh network; final layer optionally zero-initialized."""

    def __init__(self, name, in_width, hidden, out_width, rng, zero_last=True):
        def uniform(rows, cols, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=(rows, cols))

        self.w1 = Parameter(f"{name}.w1", uniform(in_width, hidden, in_width))
        self.b1 = Parameter(f"{name}.b1", np.zeros(hidden))
        self.w2 = Parameter(f"{name}.w2", uniform(hidden, hidden, hidden))
        self.b2 = Parameter(f"{name}.b2", np.zeros(hidden))
        if zero_last:
            w3 = np.zeros((hidden, out_width))
        else:
            w3 = uniform(hidden, out_width, hidden)
        self.w3 = Parameter(f"{name}.w3", w3)
        self.b3 = Parameter(f"{name}.b3", np.zeros(out_width))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def apply(self, x: Tensor) -> Tensor:
        h = ad.tanh(ad.add_rowvec(ad.matmul(x, self.w1), self.b1))
        h = ad.tanh(ad.add_rowvec(ad.matmul(h, self.w2), self.b2))
        return ad.add_rowvec(ad.matmul(h, self.w3), self.b3)


class CouplingLayer:
    """One half-affine block: pass half conditions the other half's map.

    orientation 0 passes columns [0, m) and transforms [m, D);
    orientation 1 swaps the roles. Consecutive layers alternate so every
    coordinate is transformed by about half the stack.
    """

    def __init__(self, name, dim, cond_width, orientation, hidden, rng):
        if dim < 2:
            raise DimensionError("coupling needs data dimension >= 2")
        self.dim = dim
        self.split = dim // 2
        self.orientation = orientation % 2
        pass_w = self.split if self.orientation == 0 else dim - self.split
        out_w = dim - pass_w
        self.shift_net = Mlp(f"{name}.shift", pass_w + cond_width, hidden, out_w, rng)
        self.prescale_net = Mlp(f"{name}.prescale", pass_w + cond_width, hidden, out_w, rng)

    def parameters(self):
        return self.shift_net.parameters() + self.prescale_net.parameters()

    def _halves(self, x: Tensor):
        a = ad.slice_cols(x, 0, self.split)
        b = ad.slice_cols(x, self.split, self.dim)
        if self.orientation == 0:
            return a, b  # (pass, active)
        return b, a

    def _assemble(self, kept: Tensor, active: Tensor) -> Tensor:
        if self.orientation == 0:
            return ad.concat_cols([kept, active])
        return ad.concat_cols([active, kept])

    def forward(self, x: Tensor, cond: Tensor):
        """Returns the mapped batch and per-row sum of log-scales."""
        kept, active = self._halves(x)
        net_in = ad.concat_cols([kept, cond])
        shift = self.shift_net.apply(net_in)
        log_scale = ad.mul_scalar(ad.tanh(self.prescale_net.apply(net_in)), SCALE_BOUND)
        moved = ad.add(shift, ad.mul(ad.exp(log_scale), active))
        return self._assemble(kept, moved), ad.sum_rows(log_scale)

    def inverse(self, y: Tensor, cond: Tensor):
        """Returns the recovered batch and per-row log |det J| of this pass."""
        kept, moved = self._halves(y)
        net_in = ad.concat_cols([kept, cond])
        shift = self.shift_net.apply(net_in)
        log_scale = ad.mul_scalar(ad.tanh(self.prescale_net.apply(net_in)), SCALE_BOUND)
        neg_ls = ad.mul_scalar(log_scale, -1.0)
        active = ad.mul(ad.sub(moved, shift), ad.exp(neg_ls))
        return self._assemble(kept, active), ad.sum_rows(neg_ls)


class EmbeddingTable:
    """Trainable task and (task, label) vectors; lookups never allocate."""

    def __init__(self, width: int):
        self.width = width
        self._task = {}
        self._label = {}

    def add_task(self, t: int, rng) -> bool:
        if t in self._task:
            return False
        self._task[t] = Parameter(
            f"embed.task{t}", rng.normal(scale=EMBED_INIT_SD, size=(1, self.width))
        )
        return True

    def add_label(self, t: int, y: int, rng) -> bool:
        if t not in self._task:
            raise UnknownConditionError(f"task {t} has no embedding yet")
        if (t, y) in self._label:
            return False
        self._label[(t, y)] = Parameter(
            f"embed.task{t}.label{y}", rng.normal(scale=EMBED_INIT_SD, size=(1, self.width))
        )
        return True

    def has(self, t: int, y: int) -> bool:
        return (t, y) in self._label

    def task_ids(self):
        return sorted(self._task)

    def labels_for(self, t: int):
        return sorted(y for (tt, y) in self._label if tt == t)

    def parameters(self):
        out = [self._task[t] for t in sorted(self._task)]
        out += [self._label[k] for k in sorted(self._label)]
        return out

    def rows(self, t_ids, y_ids) -> Tensor:
        """Per-row [task-vec | label-vec] matrix for a batch of conditions.

        Implemented as constant one-hot selectors against the stacked
        embedding rows, so gradients scatter back to exactly the selected
        Parameters and untouched rows get exact zeros.
        """
        t_ids = np.asarray(t_ids)
        y_ids = np.asarray(y_ids)
        n = t_ids.shape[0]
        tasks = sorted(self._task)
        pairs = sorted(self._label)
        t_index = {t: i for i, t in enumerate(tasks)}
        p_index = {p: i for i, p in enumerate(pairs)}
        hot_t = np.zeros((n, len(tasks)))
        hot_p = np.zeros((n, len(pairs)))
        for i in range(n):
            key = (int(t_ids[i]), int(y_ids[i]))
            if key not in p_index:
                raise UnknownConditionError(f"no embedding for task {key[0]}, label {key[1]}")
            hot_t[i, t_index[key[0]]] = 1.0
            hot_p[i, p_index[key]] = 1.0
        task_stack = ad.concat_rows([self._task[t] for t in tasks])
        label_stack = ad.concat_rows([self._label[p] for p in pairs])
        return ad.concat_cols([
            ad.matmul(Tensor(hot_t), task_stack),
            ad.matmul(Tensor(hot_p), label_stack),
        ])


class ConditionalFlow:
    """The full bijection: coupling stack plus its conditioning table."""

    def __init__(self, dim, n_layers, embed_width, rng, hidden=None):
        if hidden is None:
            hidden = max(64, dim)
        self.dim = dim
        self.embed_width = embed_width
        self.hidden = hidden
        self.embeddings = EmbeddingTable(embed_width)
        self.layers = [
            CouplingLayer(f"flow.layer{k}", dim, 2 * embed_width, k, hidden, rng)
            for k in range(n_layers)
        ]

    @property
    def n_layers(self):
        return len(self.layers)

    def parameters(self):
        out = []
        for layer in self.layers:
            out += layer.parameters()
        out += self.embeddings.parameters()
        return out

    def add_condition(self, t: int, labels, seed_fn) -> None:
        """Allocate embeddings for task t and the given labels (idempotent).

        seed_fn(t) and seed_fn(t, y) must return rngs that depend only on
        the identifiers, so allocation order cannot perturb later draws.
        """
        self.embeddings.add_task(t, seed_fn(t))
        for y in sorted(set(int(y) for y in labels)):
            self.embeddings.add_label(t, y, seed_fn(t, y))

    def _prep(self, x, t_ids, y_ids):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        if x.data.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"batch shape {x.shape} != (n, {self.dim})")
        n = x.shape[0]
        t_ids = np.full(n, t_ids) if np.ndim(t_ids) == 0 else np.asarray(t_ids)
        y_ids = np.full(n, y_ids) if np.ndim(y_ids) == 0 else np.asarray(y_ids)
        if t_ids.shape != (n,) or y_ids.shape != (n,):
            raise DimensionError("condition id arrays must match the batch length")
        return x, self.embeddings.rows(t_ids, y_ids)

    def forward(self, x, t_ids, y_ids):
        """Data batch -> (latent batch, per-row log |det J|)."""
        cur, cond = self._prep(x, t_ids, y_ids)
        log_det = None
        for layer in self.layers:
            cur, ls = layer.forward(cur, cond)
            log_det = ls if log_det is None else ad.add(log_det, ls)
        return cur, log_det

    def inverse(self, z, t_ids, y_ids, return_log_det=False):
        """Latent batch -> data batch (generation direction)."""
        cur, cond = self._prep(z, t_ids, y_ids)
        log_det = None
        for layer in reversed(self.layers):
            cur, ls = layer.inverse(cur, cond)
            log_det = ls if log_det is None else ad.add(log_det, ls)
        if return_log_det:
            return cur, log_det
        return cur
