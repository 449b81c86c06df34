import json
import math
from pathlib import Path

import numpy as np
import pytest

from affectloop.affect import AffectState, Needs, Temperature, softmax
from affectloop.config import controller_params, load_config, reference_config
from affectloop.controller import (
    N_ACTIONS,
    EmotionController,
    MoodBuffer,
    Policy,
    TemplateParams,
    policy_templates,
    reappraise,
    replay,
    sample_index,
    score_actions,
    select_action,
    update_mood,
)
from affectloop.memory import EpisodicMemory, MemoryConfig, SICViolation
from affectloop.world import (
    PAUSE,
    CrowdWorld,
    InstantiationParams,
    Perception,
    PerceptionConfig,
    Scenario,
    ThreatScript,
)

import oracle

GOLDEN = Path(__file__).parent / "fixtures" / "golden"


def y_params(peer=0.0, peer_valid=True, safe=0.0, safe_valid=True):
    return InstantiationParams(peer, 2.0, peer_valid, 0.0, 0.0, False, safe, safe_valid)


def make_controller(scenario, params=None, seed=0):
    params = params or controller_params(reference_config())
    mem = EpisodicMemory(MemoryConfig(), audit_mode=True)
    ctrl = EmotionController(params, Perception(scenario.perception), mem, seed=seed)
    return ctrl, CrowdWorld(scenario, seed)


COMFORT = Scenario(
    agent_position=(20.0, 20.0),
    peer_positions=((22.0, 20.0), (20.0, 22.5), (18.0, 18.0)),
)


class TestTemplates:
    def test_rest_prefers_pause(self):
        q = np.eye(5)[Policy.REST]
        assert int(np.argmax(score_actions(q, y_params()))) == PAUSE

    def test_seek_aligns_with_peers(self):
        s = score_actions(np.eye(5)[Policy.SEEK], y_params(peer=0.0))
        assert s[0] == 1.0 and int(np.argmax(s)) == 0

    def test_seek_avoid_mix_is_flat(self):
        s = score_actions([0.5, 0.5, 0, 0, 0], y_params(peer=0.0))
        assert s[:8].tolist() == pytest.approx([0.5] * 8, abs=1e-15)
        assert s[0] == pytest.approx(s[4], abs=1e-15)

    def test_invalid_referent_is_uniform(self):
        t = policy_templates(y_params(peer_valid=False, safe_valid=False))
        assert t[Policy.SEEK].tolist() == [0.5] * N_ACTIONS
        assert t[Policy.FLEE].tolist() == [0.5] * N_ACTIONS

    def test_explore_rest_constants(self):
        t = policy_templates(y_params())
        assert t[Policy.EXPLORE].tolist() == [0.6] * 8 + [0.2]
        assert t[Policy.REST].tolist() == [0.1] * 8 + [1.0]

    def test_scores_in_unit_interval(self):
        t = policy_templates(y_params(peer=1.3, safe=-2.0))
        assert t.min() >= 0.0 and t.max() <= 1.0

    def test_unnormalized_q(self):
        with pytest.raises(ValueError):
            score_actions([0.5, 0.4, 0, 0, 0], y_params())

    def test_template_range_validation(self):
        with pytest.raises(ValueError):
            TemplateParams(explore_move=1.5)


class TestSelection:
    def test_argmax_tie(self):
        assert select_action(np.full(9, 0.3), 0.0, "argmax", None, Temperature(0.5, 0.05)) == (0, None)

    def test_sharp_sampling(self):
        s = np.zeros(9)
        s[4] = 1.0
        p = softmax(s, 0.05)
        assert p[4] >= 0.99
        assert p[4] == pytest.approx(oracle.softmax(s.tolist(), 0.05)[4], abs=1e-15)

    def test_seeded_sampling_repeats(self):
        s = np.linspace(0, 1, 9)
        a = select_action(s, 0.2, "sample", np.random.default_rng(11), Temperature(0.5, 0.05))
        b = select_action(s, 0.2, "sample", np.random.default_rng(11), Temperature(0.5, 0.05))
        assert a == b

    def test_inverse_cdf(self):
        p = np.array([0.2, 0.3, 0.5])
        assert [sample_index(p, d) for d in (0.0, 0.19, 0.2, 0.49, 0.5, 0.999999)] == [0, 0, 1, 1, 2, 2]

    def test_non_finite(self):
        with pytest.raises(ValueError):
            select_action(np.array([np.inf] * 9), 0.0, "argmax", None, Temperature())


class TestReappraise:
    Z = AffectState.zeros(2, 3)

    def test_no_change(self):
        n = Needs([0.5, 0.5, 1.0], [1, 1, 1])
        assert reappraise(self.Z, n, n, self.Z)[1] == 0.0

    def test_halved_discrepancies(self):
        pre = Needs([0.6, 0.4, 1.0], [1, 1, 1])
        post = Needs([0.8, 0.7, 1.0], [1, 1, 1])
        assert reappraise(self.Z, pre, post, self.Z, gain=1.0)[1] == pytest.approx(0.5, abs=1e-12)

    def test_worse(self):
        pre = Needs([0.8, 0.7, 1.0], [1, 1, 1])
        post = Needs([0.6, 0.4, 1.0], [1, 1, 1])
        assert reappraise(self.Z, pre, post, self.Z)[1] < 0

    def test_clipped(self):
        pre = Needs([0.0, 0.0, 0.0], [1, 1, 1])
        post = Needs([1.0, 1.0, 1.0], [1, 1, 1])
        assert reappraise(self.Z, pre, post, self.Z)[1] == 1.0

    def test_post_affect_is_need_affect(self):
        z_post = AffectState([-0.2, 0.0], [0.2, 0.0], 0.2, [0.2, 0.0, 0.0])
        n = Needs([0.8, 1.0, 1.0], [1, 1, 1])
        assert reappraise(self.Z, n, n, z_post)[0] is z_post

    def test_hedonic(self):
        pre = AffectState([-0.4, 0.0], [0.4, 0.0], 0.4, [0.4, 0.0, 0.0])
        post = AffectState([-0.2, 0.0], [0.2, 0.0], 0.2, [0.2, 0.0, 0.0])
        n = Needs([0.5, 1.0, 1.0], [1, 1, 1])
        assert reappraise(pre, n, n, post, gain=1.0, mode="hedonic")[1] == pytest.approx(0.1, abs=1e-15)


class TestMood:
    def test_fixed_point(self):
        z = AffectState([-0.2, 0.1], [0.2, 0.0], 0.2, [0.2, -0.1, 0.0])
        assert update_mood(MoodBuffer(z, 0.9), z).value.flat().tolist() == pytest.approx(z.flat().tolist(), abs=1e-15)

    def test_closed_form(self):
        one = AffectState.from_flat([0, 0, 0, 0, 1.0, 0, 0, 0], 2, 3)
        buf = MoodBuffer.empty(2, 3, 0.9)
        for n in range(1, 60):
            buf = update_mood(buf, one)
            assert buf.value.arousal == pytest.approx(1 - 0.9**n, abs=1e-12)

    def test_decay_range(self):
        with pytest.raises(ValueError):
            MoodBuffer.empty(2, 3, 0.5)


class TestTick:
    def test_zero_signal_tick(self):
        ctrl, w = make_controller(COMFORT)
        trace, _ = ctrl.tick(w, w.reset())
        assert trace.needs.values.tolist() == [1.0, 1.0, 1.0]
        assert trace.h.tolist() == [0.0] * 5
        assert trace.q.tolist() == pytest.approx([0.2] * 5, abs=1e-15)
        assert trace.draw is not None

    def test_one_read_one_write(self):
        ctrl, w = make_controller(COMFORT)
        s = w.reset()
        for i in range(3):
            trace, s = ctrl.tick(w, s)
            assert trace.stored_index == i
            assert (ctrl.guard.reads, ctrl.guard.writes) == (1, 1)
        assert len(ctrl.memory) == 3

    def test_threat_fixture_flees_to_safe_bin(self):
        sc = Scenario(
            agent_position=(20.0, 20.0),
            peer_positions=COMFORT.peer_positions,
            threat=ThreatScript(0, (-1.0, 0.0), 0.5, 0.1),
            perception=PerceptionConfig(safe_center=(30.0, 25.0), safe_radius=3.0),
        )
        params = controller_params(reference_config(**{"controller.action_mode": "argmax"}))
        ctrl, w = make_controller(sc, params)
        trace, _ = ctrl.tick(w, w.reset())

        # hand pipeline: safety drive from the logistic curve at distance 1,
        # mood buffer starts at zero so fused affect is 0.85 * need affect
        safety = 1 / (1 + math.exp(-(1.0 - 6.0) / 1.5))
        z_need = oracle.affect([1.0, 1.0, safety], [1, 1, 1], [1, 1, 1], [[-1, 0, 0], [0, -1, 0]], [[1, 0, 0], [0, 1, 0]])
        z = [0.85 * v for v in oracle.flat(z_need)]
        h_need = [0.0, 0.0, 0.0, 2 * z_need["d"][2], 0.0]
        h_aff = [0.0, 0.0, 0.0, z[7], -0.5 * z[4]]
        h = [a + b for a, b in zip(h_need, h_aff)]
        q = oracle.softmax(h, 2.0 - z[4] * 1.75)
        safe_bearing = math.atan2(5.0, 10.0)
        peer_bearing = math.atan2(0.5, 0.0)
        s = []
        for k in range(8):
            th = k * math.pi / 4
            s.append(q[0] * oracle.alignment(th, peer_bearing) + q[1] * oracle.alignment(th, peer_bearing + math.pi)
                     + q[2] * 0.6 + q[3] * oracle.alignment(th, safe_bearing) + q[4] * 0.1)
        s.append(q[2] * 0.2 + q[4] * 1.0)

        assert trace.z.flat().tolist() == pytest.approx(z, abs=1e-12)
        assert trace.q.tolist() == pytest.approx(q, abs=1e-12)
        assert trace.s.tolist() == pytest.approx(s, abs=1e-12)
        assert trace.policy == Policy.FLEE
        nearest_bin = min(range(8), key=lambda k: abs(k * math.pi / 4 - safe_bearing))
        assert trace.action == nearest_bin == 1

    def test_deterministic(self):
        sc = Scenario(agent_position=(5.0, 5.0), peer_positions=((20.0, 20.0),), peer_motion="random_walk")
        a, wa = make_controller(sc, seed=4)
        b, wb = make_controller(sc, seed=4)
        sa, sb = wa.reset(), wb.reset()
        for _ in range(20):
            ta, sa = a.tick(wa, sa)
            tb, sb = b.tick(wb, sb)
            assert ta.to_json() == tb.to_json()

    def test_memory_tokens_taken(self):
        ctrl, _ = make_controller(COMFORT)
        with pytest.raises(SICViolation):
            ctrl.memory.reader_token()

    def test_trace_schema(self):
        ctrl, w = make_controller(COMFORT)
        d = ctrl.tick(w, w.reset())[0].to_dict()
        assert d["schema"] == "affectloop.trace/1"
        assert json.loads(json.dumps(d)) == d


class TestParams:
    def test_ablation(self):
        p = controller_params(reference_config()).ablate_memory()
        assert p.hints.alphas.tolist() == [1.0, 0.0, 1.0]
        assert p.memory_weight == 0.0

    def test_hashes_stable(self):
        a = controller_params(reference_config())
        b = controller_params(reference_config())
        ma, mb = EpisodicMemory(), EpisodicMemory()
        pa = Perception(PerceptionConfig())
        assert EmotionController(a, pa, ma).frozen_hashes() == EmotionController(b, pa, mb).frozen_hashes()

    def test_hash_sees_single_entry(self):
        p = controller_params(reference_config())
        q = controller_params(reference_config(**{"controller.tau_policy": (2.0, 0.3)}))
        from affectloop.controller import hash_groups

        ha, hb = hash_groups(p.groups()), hash_groups(q.groups())
        assert [k for k in ha if ha[k] != hb[k]] == ["temperatures"]


class TestReplay:
    def golden(self):
        cfg = load_config(GOLDEN / "config.json")
        from affectloop.system import build_system

        system = build_system(cfg)
        records = [json.loads(l) for l in (GOLDEN / "traces.jsonl").read_text().splitlines()]
        return records, system.params, Perception(system.scenario.perception)

    def test_golden_passes(self):
        records, params, perc = self.golden()
        res = replay(records, params, perc)
        assert res.ok and res.ticks == 50

    def test_flipped_bit_in_q(self):
        records, params, perc = self.golden()
        q = np.array(records[17]["q"])
        bits = q.view(np.uint64)
        bits[2] ^= np.uint64(1)
        records[17]["q"] = q.tolist()
        res = replay(records, params, perc)
        assert not res.ok
        assert (res.failed_tick, res.failed_field) == (17, "q")

    def test_empty(self):
        _, params, perc = self.golden()
        assert replay([], params, perc).ok

    def test_wrong_params_detected(self):
        records, _, perc = self.golden()
        other = controller_params(reference_config(**{"controller.mood_weight": 0.2}))
        assert not replay(records, other, perc).ok
