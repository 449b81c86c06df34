import math

import numpy as np
import pytest

from affectloop.affect import AffectState
from affectloop.memory import (
    Episode,
    EpisodicMemory,
    MemoryConfig,
    Phase,
    PhaseGuard,
    ReconcileConfig,
    SICViolation,
    check_category,
    is_flash,
    load_episodes,
    save_episodes,
    similarity,
)

import oracle


def key(s, dim=6):
    """Unit key with similarity ``s`` to e0."""
    v = np.zeros(dim)
    v[0], v[1] = s, math.sqrt(1.0 - s * s)
    return v


def onehot(i, dim=6):
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def ep(k, succ=0.0, hint=0, z=None, mag=0.0):
    z = z if z is not None else AffectState([0.0, 0.0], [mag, 0.0], 0.0, [0.0, 0.0, 0.0])
    h = np.zeros(5)
    h[hint] = 1.0
    return Episode(k, z, h, z, succ)


class Harness:
    """Memory plus the controller-side tokens and phase discipline."""

    def __init__(self, **cfg):
        self.mem = EpisodicMemory(MemoryConfig(**cfg), audit_mode=True)
        self.mem.set_shape(2, 3, 5)
        self.reader = self.mem.reader_token()
        self.writer = self.mem.writer_token()

    def store(self, *episodes):
        with self.mem.guard.enter(Phase.A8):
            return [self.mem.store(self.writer, e) for e in episodes]

    def retrieve(self, q, k=None):
        with self.mem.guard.enter(Phase.A3):
            return self.mem.retrieve(self.reader, q, k)

    def snapshot(self):
        return self.mem.snapshot(self.reader)


class TestEpisode:
    def test_succ_bounds(self):
        with pytest.raises(ValueError):
            ep(onehot(0), succ=1.5)

    def test_key_must_be_unit_nonnegative(self):
        with pytest.raises(ValueError):
            check_category([0.5, 0.5])
        with pytest.raises(ValueError):
            check_category([-1.0, 0.0])
        check_category([0.6, 0.8])

    def test_jsonl_roundtrip(self, tmp_path):
        e = Episode(key(0.3), AffectState([-0.1, 0.2], [0.1, 0.2], 0.3, [0.1, 0.2, 0.3]), [0.1] * 5,
                    AffectState.zeros(2, 3), 1 / 3)
        save_episodes(tmp_path / "e.jsonl", [e, e])
        assert load_episodes(tmp_path / "e.jsonl") == [e, e]


class TestAccessControl:
    def test_single_reader(self):
        h = Harness()
        with pytest.raises(SICViolation) as exc:
            h.mem.reader_token()
        assert exc.value.clause == "SIC-1"

    def test_single_writer(self):
        h = Harness()
        with pytest.raises(SICViolation):
            h.mem.writer_token()

    def test_read_outside_a3(self):
        h = Harness()
        with pytest.raises(SICViolation) as exc:
            h.mem.retrieve(h.reader, onehot(0))
        assert exc.value.clause == "SIC-5"
        with h.mem.guard.enter(Phase.A8), pytest.raises(SICViolation):
            h.mem.retrieve(h.reader, onehot(0))

    def test_write_outside_a8(self):
        h = Harness()
        with h.mem.guard.enter(Phase.A3), pytest.raises(SICViolation):
            h.mem.store(h.writer, ep(onehot(0)))

    def test_forged_token(self):
        h = Harness()
        other = EpisodicMemory()
        with h.mem.guard.enter(Phase.A3), pytest.raises(SICViolation):
            h.mem.retrieve(other.reader_token(), onehot(0))

    def test_snapshot_needs_audit_mode(self):
        mem = EpisodicMemory()
        with pytest.raises(PermissionError):
            mem.snapshot(mem.reader_token())

    def test_reconcile_refused_mid_tick(self):
        h = Harness()
        with h.mem.guard.tick(), pytest.raises(SICViolation):
            h.mem.reconcile()

    def test_nested_tick(self):
        g = PhaseGuard()
        with g.tick(), pytest.raises(SICViolation):
            with g.tick():
                pass


class TestStore:
    def test_first_store(self):
        h = Harness()
        assert h.store(ep(onehot(0))) == [0]
        assert len(h.mem) == 1

    def test_eviction_fixture(self):
        # capacity 3: e0 is flash-bulb, e1 has been retrieved, e2 is the
        # least useful non-flash record; storing e3 must evict e2
        h = Harness(capacity=3)
        h.store(ep(onehot(0), succ=0.95), ep(onehot(1), succ=0.1), ep(onehot(2), succ=0.2))
        h.retrieve(onehot(1), k=1)
        h.store(ep(onehot(3), succ=0.0))
        snap = h.snapshot()
        assert len(h.mem) == 3
        assert [int(np.argmax(e.key)) for e in snap] == [0, 1, 3]

    def test_eviction_oldest_when_equal(self):
        h = Harness(capacity=2)
        h.store(ep(onehot(0)), ep(onehot(1)), ep(onehot(2)))
        assert [int(np.argmax(e.key)) for e in h.snapshot()] == [1, 2]


class TestRetrieve:
    def test_empty(self):
        r = Harness().retrieve(onehot(0))
        assert r.reliability == 0.0
        assert r.z_mem == AffectState.zeros(2, 3)
        assert r.h_mem.tolist() == [0.0] * 5

    def test_identical_keys_average(self):
        h = Harness(k=2)
        za = AffectState([-0.4, 0.0], [0.4, 0.0], 0.4, [0.4, 0.0, 0.0])
        zb = AffectState([0.2, 0.0], [0.0, 0.0], 0.2, [-0.2, 0.0, 0.0])
        h.store(Episode(onehot(0), za, np.eye(5)[0], za, 1.0), Episode(onehot(0), zb, np.eye(5)[0], zb, 1.0))
        r = h.retrieve(onehot(0))
        assert r.z_mem.flat().tolist() == pytest.approx(((za.flat() + zb.flat()) / 2).tolist(), abs=1e-15)
        assert r.h_mem.tolist() == pytest.approx([1.0, 0, 0, 0, 0], abs=1e-15)
        assert r.reliability == 1.0

    def test_three_episode_hand_fixture(self):
        # similarities 0.9, 0.5, 0.1; K=2 keeps the first two with weights 9/14, 5/14
        h = Harness(k=2)
        h.store(ep(key(0.1), succ=0.7, hint=2), ep(key(0.5), succ=-1.0, hint=1), ep(key(0.9), succ=1.0, hint=0))
        r = h.retrieve(onehot(0))
        assert r.h_mem.tolist() == pytest.approx([9 / 14, -5 / 14, 0.0, 0.0, 0.0], abs=1e-12)
        assert r.reliability == pytest.approx(0.9, abs=1e-15)

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        h = Harness(k=3)
        recs = []
        for i in range(7):
            k = rng.random(6)
            k /= np.linalg.norm(k)
            z1 = AffectState(rng.uniform(-1, 1, 2), rng.uniform(0, 1, 2), rng.uniform(), rng.uniform(-1, 1, 3))
            z2 = AffectState(rng.uniform(-1, 1, 2), rng.uniform(0, 1, 2), rng.uniform(), rng.uniform(-1, 1, 3))
            e = Episode(k, z1, rng.uniform(-1, 1, 5), z2, float(rng.uniform(-1, 1)))
            h.store(e)
            recs.append({"key": e.key.tolist(), "z_pre": z1.flat().tolist(), "z_post": z2.flat().tolist(),
                         "hints": e.hints.tolist(), "succ": e.succ, "index": i})
        q = rng.random(6)
        q /= np.linalg.norm(q)
        r = h.retrieve(q)
        ref = oracle.retrieve(recs, q.tolist(), 3)
        assert r.z_mem.flat().tolist() == pytest.approx(ref["z"], abs=1e-12)
        assert r.h_mem.tolist() == pytest.approx(ref["h"], abs=1e-12)
        assert r.reliability == pytest.approx(ref["reliability"], abs=1e-15)

    def test_tie_break_by_write_order(self):
        h = Harness(k=1)
        h.store(ep(onehot(0), succ=0.5, hint=3), ep(onehot(0), succ=0.5, hint=4))
        assert int(np.argmax(h.retrieve(onehot(0)).h_mem)) == 3

    def test_orthogonal_query(self):
        h = Harness()
        h.store(ep(onehot(0), succ=1.0))
        assert h.retrieve(onehot(1)).reliability == 0.0

    def test_retrieval_counts(self):
        h = Harness(k=1)
        h.store(ep(onehot(0)), ep(onehot(1)))
        h.retrieve(onehot(1))
        assert [r.retrievals for r in h.mem._records] == [0, 1]


RC = dict(dup_threshold=0.98, flash_threshold=0.8, max_age=200, min_retrievals=1, horizon=5,
          rare_threshold=0.9, bonus=0.1, reestimate_weight=0.7)


class TestReconcile:
    def test_empty(self):
        rep = Harness().mem.reconcile()
        assert (rep.merged, rep.pruned, rep.edited) == (0, 0, 0)

    def test_duplicates_keep_largest_succ(self):
        h = Harness()
        h.store(ep(onehot(0), succ=0.1), ep(onehot(0), succ=0.9))
        rep = h.mem.reconcile(ReconcileConfig(**{**RC, "horizon": 0}))
        assert rep.merged == 1
        assert [e.succ for e in h.snapshot()] == [0.9]

    def test_different_policy_not_merged(self):
        h = Harness()
        h.store(ep(onehot(0), succ=0.1, hint=0), ep(onehot(0), succ=0.9, hint=1))
        assert h.mem.reconcile(ReconcileConfig(**{**RC, "horizon": 0})).merged == 0

    def test_backward_bonus_chain(self):
        h = Harness()
        h.store(ep(onehot(0), 0.2), ep(onehot(1), 0.2), ep(onehot(2), 1.0))
        h.mem.reconcile(ReconcileConfig(**{**RC, "reestimate_weight": 1.0}))
        assert [e.succ for e in h.snapshot()] == pytest.approx([0.2, 0.3, 1.0], abs=1e-15)

    def test_prune_then_snapshot(self):
        h = Harness()
        h.store(ep(onehot(0), 0.1), ep(onehot(1), 0.1), ep(onehot(2), 0.1))
        rep = h.mem.reconcile(ReconcileConfig(**{**RC, "max_age": 2, "horizon": 0}))
        assert rep.pruned == 1
        assert [int(np.argmax(e.key)) for e in h.snapshot()] == [1, 2]

    def test_flash_survives_prune(self):
        h = Harness()
        h.store(ep(onehot(0), 0.0, mag=0.85), ep(onehot(1), 0.1), ep(onehot(2), 0.1))
        h.mem.reconcile(ReconcileConfig(**{**RC, "max_age": 0, "horizon": 0}))
        assert [int(np.argmax(e.key)) for e in h.snapshot()] == [0]

    def test_retrieved_survives_prune(self):
        h = Harness(k=1)
        h.store(ep(onehot(0), 0.1), ep(onehot(1), 0.1))
        h.retrieve(onehot(0))
        h.mem.reconcile(ReconcileConfig(**{**RC, "max_age": 0, "horizon": 0}))
        assert [int(np.argmax(e.key)) for e in h.snapshot()] == [0]

    def test_reestimate_and_clip(self):
        h = Harness()
        h.store(ep(onehot(0), 0.95), ep(onehot(1), 1.0), ep(onehot(2), 1.0))
        h.mem.reconcile(ReconcileConfig(**RC))
        succ = [e.succ for e in h.snapshot()]
        assert succ[0] == 1.0  # 0.7*0.95 + 0.3*1.0 + 0.1 clipped
        assert succ[1] == 1.0
        assert succ[2] == 1.0

    def test_only_succ_is_rewritten(self):
        h = Harness()
        h.store(ep(onehot(0), 0.2), ep(onehot(1), -0.4))
        before = h.snapshot()
        h.mem.reconcile()
        after = h.snapshot()
        for a, b in zip(before, after):
            assert a.key.tobytes() == b.key.tobytes()
            assert a.z_pre == b.z_pre and a.z_post == b.z_post
            assert a.hints.tobytes() == b.hints.tobytes()

    def test_flash_rule(self):
        assert is_flash(ep(onehot(0), -0.8), 0.8)
        assert not is_flash(ep(onehot(0), 0.79), 0.8)
        assert is_flash(ep(onehot(0), 0.0, mag=0.9), 0.8)

    def test_similarity_is_order_free(self):
        a, b = np.array([0.1, 0.7, 0.2]), np.array([0.3, 0.3, 0.9])
        assert similarity(a, b) == similarity(a[::-1], b[::-1])
