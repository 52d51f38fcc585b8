import struct

import numpy as np
import pytest

from exflow.data import Standardizer
from exflow.errors import (
    ChecksumError,
    MagicError,
    PersistError,
    TruncationError,
    VersionError,
)
from exflow.inference import (
    calibrate_outlier,
    is_outlier_batch,
    label_posterior_batch,
    task_posterior_batch,
)
from exflow.model import ContinualFlowModel
from exflow.persist import load_model, save_model, serialize_model


def build_model(dim=4, n_layers=2, embed_width=3, hidden=8, seed=7):
    """A small two-task model with perturbed weights and absorbed state."""
    model = ContinualFlowModel(
        dim, n_layers=n_layers, embed_width=embed_width, pseudo_count=32,
        replay_weight=0.5, functional_weight=1.5, base_seed=11, hidden=hidden,
    )
    model.register_task(1, {1: 3, 2: 2})
    model.register_task(2, {1: 4, 2: 1})
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data += rng.normal(scale=0.05, size=p.data.shape)
    for t in (1, 2):
        xs = rng.normal(size=(6, dim))
        ys = rng.choice([1, 2], size=6)
        model.finalize_task_state(t, xs, ys)
    return model


class TestRoundtrip:
    def test_probe_outputs_bit_exact(self, tmp_path):
        model = build_model()
        path = tmp_path / "m.bin"
        save_model(model, path)
        loaded, tf = load_model(path)

        rng = np.random.default_rng(3)
        probes = rng.normal(size=(10, model.dim))
        for t in (1, 2):
            ys = rng.integers(1, 3, size=10)
            z0, ld0 = model.latent_batch(t, probes, ys)
            z1, ld1 = loaded.latent_batch(t, probes, ys)
            assert np.array_equal(z0, z1)
            assert np.array_equal(ld0, ld1)
            l0, p0 = label_posterior_batch(model, t, probes)
            l1, p1 = label_posterior_batch(loaded, t, probes)
            assert l0 == l1
            assert np.array_equal(p0, p1)
        i0, q0 = task_posterior_batch(model, probes)
        i1, q1 = task_posterior_batch(loaded, probes)
        assert i0 == i1
        assert np.array_equal(q0, q1)
        assert tf.is_identity()

    def test_records_roundtrip(self, tmp_path):
        model = build_model()
        path = tmp_path / "m.bin"
        save_model(model, path)
        loaded, _ = load_model(path)

        assert loaded.task_ids() == model.task_ids()
        for t in model.task_ids():
            a, b = model.record(t), loaded.record(t)
            assert a.label_counts == b.label_counts
            assert np.array_equal(a.latent.raw_var.data, b.latent.raw_var.data)
            assert np.array_equal(a.latent.raw_cov.data, b.latent.raw_cov.data)
            assert a.state.count == b.state.count
            assert np.array_equal(a.state.total, b.state.total)
            la, ca = a.prior()
            lb, cb = b.prior()
            assert la == lb and np.array_equal(ca, cb)

    def test_hyperparameters_and_revision_roundtrip(self, tmp_path):
        model = build_model()
        path = tmp_path / "m.bin"
        save_model(model, path)
        loaded, _ = load_model(path)
        for attr in ("dim", "n_layers", "embed_width", "hidden", "pseudo_count",
                     "replay_weight", "functional_weight", "base_seed", "revision"):
            assert getattr(loaded, attr) == getattr(model, attr)

    def test_outlier_threshold_survives_restart(self, tmp_path):
        # thresholds carry the model revision, so a reloaded model must
        # present the same revision for a pre-restart threshold to stay valid
        model = build_model()
        thr = calibrate_outlier(model, 1, 0.1, 200, np.random.default_rng(5))
        path = tmp_path / "m.bin"
        save_model(model, path)
        loaded, _ = load_model(path)

        xs = np.random.default_rng(6).normal(size=(20, model.dim))
        f0, d0 = is_outlier_batch(model, thr, xs)
        f1, d1 = is_outlier_batch(loaded, thr, xs)
        assert np.array_equal(f0, f1)
        assert np.array_equal(d0, d1)

    def test_standardizer_roundtrip(self, tmp_path):
        model = build_model(dim=3)
        rng = np.random.default_rng(9)
        tf = Standardizer.fit(rng.normal(loc=5.0, scale=2.0, size=(40, 3)))
        path = tmp_path / "m.bin"
        save_model(model, path, standardizer=tf)
        _, tf2 = load_model(path)
        assert np.array_equal(tf.offset, tf2.offset)
        assert np.array_equal(tf.scale, tf2.scale)
        assert not tf2.is_identity()

    def test_untrained_fresh_model_roundtrip(self, tmp_path):
        model = ContinualFlowModel(2, n_layers=2, embed_width=2, hidden=4)
        path = tmp_path / "m.bin"
        save_model(model, path)
        loaded, _ = load_model(path)
        assert loaded.task_ids() == []
        assert loaded.revision == 0


class TestDeterminism:
    def test_two_saves_byte_identical(self, tmp_path):
        model = build_model()
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_model(model, p1)
        save_model(model, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_save_after_load_byte_identical(self, tmp_path):
        model = build_model()
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_model(model, p1)
        loaded, tf = load_model(p1)
        save_model(loaded, p2, standardizer=tf)
        assert p1.read_bytes() == p2.read_bytes()

    def test_save_overwrites_in_place(self, tmp_path):
        model = build_model()
        path = tmp_path / "m.bin"
        save_model(model, path)
        save_model(model, path)
        load_model(path)
        leftovers = [p for p in tmp_path.iterdir() if p.name != "m.bin"]
        assert leftovers == []


def _arr(n):
    return 8 + 8 * n


def expected_size(dim, n_layers, embed_width, hidden, task_labels):
    """Layout arithmetic mirroring the format documented in persist.py."""
    size = 4 + 4 + 8
    size += 6 * 4 + 2 * 8 + 2 * 8
    size += 2 * _arr(dim)
    for labels in task_labels.values():
        size += 4 + 4 + len(labels) * (4 + 8)
        size += 2 * _arr(dim) + 8 + _arr(dim)
    m = dim // 2
    for k in range(n_layers):
        pass_w = m if k % 2 == 0 else dim - m
        out_w = dim - pass_w
        in_w = pass_w + 2 * embed_width
        per_net = (_arr(in_w * hidden) + _arr(hidden) + _arr(hidden * hidden)
                   + _arr(hidden) + _arr(hidden * out_w) + _arr(out_w))
        size += 2 * per_net
    size += 4 + len(task_labels) * (4 + _arr(embed_width))
    n_pairs = sum(len(v) for v in task_labels.values())
    size += 4 + n_pairs * (4 + 4 + _arr(embed_width))
    return size + 8


class TestFileSize:
    def test_size_matches_layout_formula(self, tmp_path):
        model = build_model(dim=3, n_layers=2, embed_width=2, hidden=4)
        path = tmp_path / "m.bin"
        save_model(model, path)
        want = expected_size(3, 2, 2, 4, {1: [1, 2], 2: [1, 2]})
        assert path.stat().st_size == want

    def test_size_depends_only_on_shape(self):
        a = serialize_model(build_model(seed=7))
        b = serialize_model(build_model(seed=123))
        assert len(a) == len(b)
        assert a != b


class TestCorruption:
    @pytest.fixture()
    def blob(self):
        return serialize_model(build_model())

    def write(self, tmp_path, data):
        path = tmp_path / "m.bin"
        path.write_bytes(data)
        return path

    def test_bad_magic(self, tmp_path, blob):
        path = self.write(tmp_path, b"XXXX" + blob[4:])
        with pytest.raises(MagicError):
            load_model(path)

    def test_unknown_version(self, tmp_path, blob):
        path = self.write(tmp_path, blob[:4] + struct.pack("<I", 999) + blob[8:])
        with pytest.raises(VersionError):
            load_model(path)

    def test_truncated_file(self, tmp_path, blob):
        path = self.write(tmp_path, blob[:-20])
        with pytest.raises(TruncationError):
            load_model(path)

    def test_tiny_file(self, tmp_path, blob):
        path = self.write(tmp_path, blob[:10])
        with pytest.raises(TruncationError):
            load_model(path)

    def test_appended_garbage(self, tmp_path, blob):
        path = self.write(tmp_path, blob + b"\x00" * 8)
        with pytest.raises(TruncationError):
            load_model(path)

    def test_flipped_body_byte(self, tmp_path, blob):
        i = len(blob) // 2
        mutated = blob[:i] + bytes([blob[i] ^ 0xFF]) + blob[i + 1:]
        path = self.write(tmp_path, mutated)
        with pytest.raises(ChecksumError):
            load_model(path)

    def test_every_corruption_is_a_persist_error(self, tmp_path, blob):
        cases = [
            b"XXXX" + blob[4:],
            blob[:4] + struct.pack("<I", 7) + blob[8:],
            blob[: len(blob) // 3],
            blob[:-9] + b"\x01" + blob[-8:],
        ]
        for k, data in enumerate(cases):
            path = self.write(tmp_path, data)
            with pytest.raises(PersistError):
                load_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(PersistError):
            load_model(tmp_path / "absent.bin")

    def test_unwritable_path_reports_path(self, tmp_path):
        model = build_model(dim=2, n_layers=2, embed_width=2, hidden=4)
        target = tmp_path / "no" / "such" / "dir" / "m.bin"
        with pytest.raises(PersistError, match="m.bin"):
            save_model(model, target)
