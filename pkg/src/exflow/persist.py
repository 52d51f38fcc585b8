"""Bit-exact single-file model persistence.

Layout (all little-endian; f64 arrays are length-prefixed by a u64
element count and stored row-major):

    magic           4 bytes  "CLB1"
    version         u32      currently 1
    total_length    u64      byte length of the whole file
    header          u32 x 6  dim, n_layers, embed_width, hidden,
                             task_count, pseudo_count
                    u64 x 2  revision, base_seed
                    f64 x 2  replay_weight, functional_weight
    standardizer    2 arrays offset[dim], scale[dim] (identity when unused)
    task blocks     per task, ascending id:
                        u32 task_id, u32 n_labels,
                        (u32 label, u64 count) per label ascending,
                        arrays raw_var[dim], raw_cov[dim],
                        u64 state_count, array state_total[dim]
    flow blocks     per layer 0..n_layers-1, per net (shift, prescale),
                    arrays w1, b1, w2, b2, w3, b3
    embeddings      u32 count, (u32 task_id, array vec[embed]) ascending;
                    u32 count, (u32 task_id, u32 label, array vec[embed])
                    ascending by (task, label)
    checksum        u64      xxh64 of every preceding byte

Validation order on load: magic, version, total length, checksum, then
field parsing; a failure at any stage surfaces a distinct error type and
never yields a partially built model.
"""

from __future__ import annotations

import os
import struct

import numpy as np
import xxhash

from exflow.data import Standardizer
from exflow.errors import (
    ChecksumError,
    MagicError,
    PersistError,
    TruncationError,
    VersionError,
)
from exflow.latent import LatentState
from exflow.model import ContinualFlowModel, TaskRecord

MAGIC = b"CLB1"
VERSION = 1


class _Writer:
    def __init__(self):
        self.parts = []

    def u32(self, v):
        self.parts.append(struct.pack("<I", int(v)))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", int(v)))

    def f64(self, v):
        self.parts.append(struct.pack("<d", float(v)))

    def array(self, arr):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        self.u64(arr.size)
        self.parts.append(arr.tobytes())

    def bytes_out(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncationError(f"{self.path}: ran past end of file while parsing")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def array(self, expect=None):
        n = self.u64()
        if expect is not None and n != expect:
            raise PersistError(
                f"{self.path}: array length {n} where {expect} expected"
            )
        raw = self.take(8 * n)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def done(self):
        return self.pos == len(self.buf)


def _flow_param_arrays(model):
    """Layer/net/parameter arrays in the declared file order."""
    for layer in model.flow.layers:
        for net in (layer.shift_net, layer.prescale_net):
            for p in (net.w1, net.b1, net.w2, net.b2, net.w3, net.b3):
                yield p


def serialize_model(model, standardizer=None) -> bytes:
    """The full file image, checksum included."""
    if standardizer is None:
        standardizer = Standardizer.identity(model.dim)
    w = _Writer()
    w.u32(model.dim)
    w.u32(model.n_layers)
    w.u32(model.embed_width)
    w.u32(model.hidden)
    w.u32(len(model.tasks))
    w.u32(model.pseudo_count)
    w.u64(model.revision)
    w.u64(model.base_seed)
    w.f64(model.replay_weight)
    w.f64(model.functional_weight)
    w.array(standardizer.offset)
    w.array(standardizer.scale)
    for t in model.task_ids():
        rec = model.tasks[t]
        w.u32(t)
        w.u32(len(rec.label_counts))
        for y in rec.labels():
            w.u32(y)
            w.u64(rec.label_counts[y])
        w.array(rec.latent.raw_var.data)
        w.array(rec.latent.raw_cov.data)
        w.u64(rec.state.count)
        w.array(rec.state.total)
    for p in _flow_param_arrays(model):
        w.array(p.data)
    emb = model.flow.embeddings
    task_ids = emb.task_ids()
    w.u32(len(task_ids))
    for t in task_ids:
        w.u32(t)
        w.array(emb._task[t].data)
    pairs = sorted(emb._label)
    w.u32(len(pairs))
    for t, y in pairs:
        w.u32(t)
        w.u32(y)
        w.array(emb._label[(t, y)].data)

    body = w.bytes_out()
    total = 4 + 4 + 8 + len(body) + 8
    head = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", total)
    payload = head + body
    checksum = xxhash.xxh64(payload).intdigest()
    return payload + struct.pack("<Q", checksum)


def save_model(model, path, standardizer=None) -> None:
    """Write the model atomically (temp file + rename)."""
    blob = serialize_model(model, standardizer)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise PersistError(f"cannot write {path}: {exc}") from exc


def load_model(path):
    """Read and validate a model file; returns (model, standardizer)."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise PersistError(f"cannot read {path}: {exc}") from exc

    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicError(f"{path}: not a model file (bad magic)")
    if len(buf) < 16:
        raise TruncationError(f"{path}: file shorter than any valid model")
    version = struct.unpack("<I", buf[4:8])[0]
    if version != VERSION:
        raise VersionError(f"{path}: unsupported format version {version}")
    total = struct.unpack("<Q", buf[8:16])[0]
    if len(buf) != total:
        raise TruncationError(
            f"{path}: file is {len(buf)} bytes, header declares {total}"
        )
    stored = struct.unpack("<Q", buf[-8:])[0]
    if xxhash.xxh64(buf[:-8]).intdigest() != stored:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt")

    r = _Reader(buf[16:-8], path)
    dim = r.u32()
    n_layers = r.u32()
    embed_width = r.u32()
    hidden = r.u32()
    task_count = r.u32()
    pseudo_count = r.u32()
    revision = r.u64()
    base_seed = r.u64()
    replay_weight = r.f64()
    functional_weight = r.f64()
    standardizer = Standardizer(r.array(dim), r.array(dim))

    task_blocks = []
    for _ in range(task_count):
        t = r.u32()
        n_labels = r.u32()
        counts = {}
        for _ in range(n_labels):
            y = r.u32()
            counts[y] = r.u64()
        raw_var = r.array(dim)
        raw_cov = r.array(dim)
        state_n = r.u64()
        state_total = r.array(dim)
        task_blocks.append((t, counts, raw_var, raw_cov, state_n, state_total))

    model = ContinualFlowModel(
        dim, n_layers=n_layers, embed_width=embed_width,
        pseudo_count=pseudo_count, replay_weight=replay_weight,
        functional_weight=functional_weight, base_seed=base_seed, hidden=hidden,
    )
    for p in _flow_param_arrays(model):
        arr = r.array(p.data.size)
        p.data[:] = arr.reshape(p.data.shape)

    n_task_emb = r.u32()
    task_vecs = {}
    for _ in range(n_task_emb):
        t = r.u32()
        task_vecs[t] = r.array(embed_width)
    n_label_emb = r.u32()
    label_vecs = {}
    for _ in range(n_label_emb):
        t = r.u32()
        y = r.u32()
        label_vecs[(t, y)] = r.array(embed_width)
    if not r.done():
        raise PersistError(f"{path}: {len(r.buf) - r.pos} unparsed trailing bytes")

    for t, counts, raw_var, raw_cov, state_n, state_total in task_blocks:
        if set(counts) != {y for (tt, y) in label_vecs if tt == t}:
            raise PersistError(f"{path}: task {t} labels disagree with embeddings")
        rec = TaskRecord(t, dim)
        rec.label_counts = counts
        rec.latent.raw_var.data[:] = raw_var
        rec.latent.raw_cov.data[:] = raw_cov
        rec.state = LatentState(state_n, state_total)
        model.tasks[t] = rec
        model.flow.add_condition(t, counts.keys(), model._embed_seed_fn)
    if set(task_vecs) != set(model.tasks):
        raise PersistError(f"{path}: embedding tasks disagree with task registry")
    for t, vec in task_vecs.items():
        model.flow.embeddings._task[t].data[:] = vec.reshape(1, embed_width)
    for key, vec in label_vecs.items():
        model.flow.embeddings._label[key].data[:] = vec.reshape(1, embed_width)
    model.revision = revision
    return model, standardizer
