import numpy as np
import pytest
import torch

from steeradapt import losses as L
from steeradapt.data import BatchStrategy
from steeradapt.nn_core import (
    DISCRIMINATOR_S2T,
    DISCRIMINATOR_SHARED,
    DISCRIMINATOR_T2S,
    GENERATOR_S2T,
    GENERATOR_T2S,
    REGRESSOR,
)
from steeradapt.training import (
    BALANCED,
    KIND_SOURCE,
    KIND_SYNTH_TARGET,
    MINIBATCH_KINDS,
    SHARED_DISCRIMINATOR,
    MetricsLog,
    Phase3Config,
    SchedulingPolicy,
    TrainingDiverged,
    balanced_iteration,
    merge_states,
    new_net,
    non_increasing_fraction,
    prepare_phase3_state,
    run_phase1,
    run_phase2,
    run_phase3,
    sparse_iteration,
)


class ScriptedAgent:
    """Replays fixed loss sequences and records what the scheduler did."""

    def __init__(self, d_losses, g_losses):
        self.d, self.g = list(d_losses), list(g_losses)
        self.log = []

    def d_loss(self):
        v = self.d.pop(0) if self.d else 0.0
        self.log.append(("d?", v))
        return v

    def g_loss(self):
        v = self.g.pop(0) if self.g else 0.0
        self.log.append(("g?", v))
        return v

    def d_update(self):
        self.log.append("D")

    def g_update(self):
        self.log.append("G")


class TestSparseScheduler:
    def test_two_d_updates_before_g_loop(self):
        agent = ScriptedAgent([0.9, 0.85, 0.75], [0.5])
        trace = sparse_iteration(agent, 0.8, 20)
        assert trace.events == ["D", "D"]
        assert trace.d_loop_steps == 2 and trace.g_loop_steps == 0
        assert agent.log == [("d?", 0.9), "D", ("d?", 0.85), "D", ("d?", 0.75), ("g?", 0.5)]

    def test_hand_traced_g_loop_with_interleaved_d(self):
        # D loop: 0.5 < 0.8 exits at once. G loop: probe 0.9 -> D probe 0.85 (update) -> G;
        # probe 0.95 -> D probe 0.6 (skip) -> G; probe 0.7 exits.
        agent = ScriptedAgent([0.5, 0.85, 0.6], [0.9, 0.95, 0.7])
        trace = sparse_iteration(agent, 0.8, 20)
        assert trace.events == ["D", "G", "G"]
        assert trace.interleaved_d == 1 and trace.g_loop_steps == 2 and trace.d_loop_steps == 0

    def test_threshold_is_inclusive(self):
        trace = sparse_iteration(ScriptedAgent([0.8, 0.1], [0.1]), 0.8, 20)
        assert trace.events == ["D"]

    @pytest.mark.parametrize("cap", [1, 3, 20])
    def test_loops_respect_cap(self, cap):
        agent = ScriptedAgent([5.0] * 200, [5.0] * 200)
        trace = sparse_iteration(agent, 0.8, cap)
        assert trace.d_loop_steps == cap and trace.g_loop_steps == cap
        assert trace.d_capped and trace.g_capped
        assert trace.g_updates == cap and trace.d_updates == 2 * cap

    def test_balanced_counts(self):
        agent = ScriptedAgent([], [])
        traces = [balanced_iteration(agent) for _ in range(7)]
        assert sum(t.d_updates for t in traces) == sum(t.g_updates for t in traces) == 7

    @pytest.mark.parametrize("bad", [0.0, -0.1])
    def test_nonpositive_threshold_rejected(self, bad):
        with pytest.raises(ValueError, match="threshold"):
            SchedulingPolicy(threshold=bad)

    def test_cap_must_be_positive(self):
        with pytest.raises(ValueError):
            SchedulingPolicy(max_inner_steps=0)


class TestPhase1:
    def test_zero_iterations_is_initialization(self, tiny_synth):
        state, log = run_phase1(tiny_synth.source, iterations=0, seed=4)
        assert state.digests()[REGRESSOR] == new_net(REGRESSOR, 4, (1, 3, 16, 32)).params.digest()
        assert log.rows == []

    def test_deterministic_loss_stream(self, tiny_synth):
        a = run_phase1(tiny_synth.source, iterations=5, batch_size=8, seed=1, log_every=1)
        b = run_phase1(tiny_synth.source, iterations=5, batch_size=8, seed=1, log_every=1)
        assert a[1].rows == b[1].rows and a[0].digests() == b[0].digests()

    def test_unlabelled_record_rejected(self, tiny_synth):
        with pytest.raises(ValueError, match="labelled"):
            run_phase1(tiny_synth.target, iterations=1)

    def test_loss_decreases(self, tiny_synth):
        _, log = run_phase1(tiny_synth.source, iterations=60, batch_size=8, seed=0, log_every=20)
        _, v = log.series("l_steering")
        assert v[-1] < v[0]

    def test_nan_aborts_with_checkpoint(self, tiny_synth, tmp_path, monkeypatch):
        monkeypatch.setattr(L, "steering_mse", lambda p, y: (p.reshape(-1) * float("nan")).mean())
        with pytest.raises(TrainingDiverged) as err:
            run_phase1(tiny_synth.source, iterations=2, batch_size=8, diag_path=tmp_path / "diag.ckpt")
        assert err.value.checkpoint_path.exists()


@pytest.fixture(scope="module")
def pretrained(tiny_synth):
    p1, _ = run_phase1(tiny_synth.source, iterations=2, batch_size=8, seed=0)
    p2, _ = run_phase2(tiny_synth.source, tiny_synth.target, iterations=1, seed=0,
                       strategy=BatchStrategy(batch_size=8))
    return merge_states(p1, p2)


class TestPhase2:
    def test_balanced_equal_counts(self, tiny_synth):
        state, _ = run_phase2(tiny_synth.source, tiny_synth.target, SchedulingPolicy(BALANCED), iterations=3,
                              strategy=BatchStrategy(batch_size=8))
        u = state.counters["updates"]
        assert u["d_s2t"] == u["g_s2t"] == u["d_t2s"] == u["g_t2s"] == 3

    def test_sparse_respects_cap(self, tiny_synth):
        state, log = run_phase2(tiny_synth.source, tiny_synth.target, SchedulingPolicy(threshold=1e-6,
                                max_inner_steps=2), iterations=2, strategy=BatchStrategy(batch_size=8))
        for d in ("s2t", "t2s"):
            _, steps = log.series(f"g_loop_steps_{d}")
            assert all(s <= 2 for s in steps)

    def test_trains_four_networks(self, tiny_synth):
        state, log = run_phase2(tiny_synth.source, tiny_synth.target, iterations=1,
                                strategy=BatchStrategy(batch_size=8))
        assert set(state.nets) == {GENERATOR_S2T, GENERATOR_T2S, DISCRIMINATOR_S2T, DISCRIMINATOR_T2S}
        assert {"l_disc_s2t", "l_gen_s2t", "l_disc_t2s", "l_gen_t2s"} <= set(log.names())

    def test_empty_manifest_rejected(self, tiny_synth):
        with pytest.raises(ValueError):
            run_phase2(tiny_synth.source.subset([]), tiny_synth.target, iterations=1)

    def test_lower_threshold_stays_longer_in_g_loop(self, tiny_synth):
        totals = {}
        for thr in (0.7, 0.8):
            state, _ = run_phase2(tiny_synth.source, tiny_synth.target, SchedulingPolicy(threshold=thr),
                                  iterations=6, strategy=BatchStrategy(batch_size=8), seed=0)
            u = state.counters["updates"]
            totals[thr] = u["g_loop_s2t"] + u["g_loop_t2s"]
        assert totals[0.7] > totals[0.8]


class TestPhase3:
    def test_regressor_changes_only_on_kinds_1_and_4(self, pretrained, tiny_synth):
        seen = []
        last = {"d": pretrained[REGRESSOR].params.digest()}

        def hook(kind, state):
            d = state[REGRESSOR].params.digest()
            seen.append((kind, d != last["d"]))
            last["d"] = d

        run_phase3(pretrained, Phase3Config(iterations=4, batch_size=8), tiny_synth.source, tiny_synth.target,
                   on_kind=hook)
        assert [k for k, _ in seen] == list(MINIBATCH_KINDS)
        assert {k for k, changed in seen if changed} == {KIND_SOURCE, KIND_SYNTH_TARGET}

    def test_shared_mode_has_four_networks(self, pretrained):
        state = prepare_phase3_state(pretrained, Phase3Config(discriminator_mode=SHARED_DISCRIMINATOR), 0)
        assert set(state.nets) == {REGRESSOR, GENERATOR_S2T, GENERATOR_T2S, DISCRIMINATOR_SHARED}

    def test_shared_mode_runs(self, pretrained, tiny_synth):
        state, log = run_phase3(pretrained, Phase3Config(SHARED_DISCRIMINATOR, iterations=4, batch_size=8),
                                tiny_synth.source, tiny_synth.target)
        assert state[DISCRIMINATOR_SHARED].updates == 4
        assert "l_combined" in log.names()

    def test_missing_role_named(self, pretrained):
        broken = pretrained.copy()
        del broken.nets[GENERATOR_T2S]
        with pytest.raises(ValueError, match=GENERATOR_T2S):
            prepare_phase3_state(broken, Phase3Config(), 0)

    def test_only_the_stepped_network_changes(self, pretrained, tiny_synth):
        from steeradapt.training import Net
        state = prepare_phase3_state(pretrained, Phase3Config(batch_size=8), 0)
        changes = []
        originals = {}
        for role, net in state.nets.items():
            originals[role] = net.step

            def wrapped(role=role, net=net):
                before = state.digests()
                originals[role]()
                after = state.digests()
                changes.append((role, sorted(r for r in after if after[r] != before[r])))
            net.step = wrapped
        run_phase3(pretrained, Phase3Config(iterations=4, batch_size=8), tiny_synth.source, tiny_synth.target,
                   state=state)
        assert changes
        for role, changed in changes:
            assert changed == [role]

    def test_zero_adversarial_weights_degenerate_to_regression(self, pretrained, tiny_synth):
        cfg = Phase3Config(iterations=8, batch_size=8, weights=L.LossWeights(0.0, 0.0, 0.0, 1.0))
        state, _ = run_phase3(pretrained, cfg, tiny_synth.source, tiny_synth.target)
        before, after = pretrained[GENERATOR_T2S].params, state[GENERATOR_T2S].params
        assert all(torch.equal(before[n], after[n]) for n in before.trainable_names())
        assert state[GENERATOR_T2S].updates == 0
        # the forward generator only follows the regression term on kind 4
        assert state[GENERATOR_S2T].updates == 2 and state[REGRESSOR].updates == 4

    def test_deterministic(self, pretrained, tiny_synth):
        cfg = Phase3Config(iterations=8, batch_size=8, val_every=1)
        a = run_phase3(pretrained, cfg, tiny_synth.source, tiny_synth.target, seed=3,
                       val_manifest=tiny_synth.target_test)
        b = run_phase3(pretrained, cfg, tiny_synth.source, tiny_synth.target, seed=3,
                       val_manifest=tiny_synth.target_test)
        assert a[1].rows == b[1].rows and a[0].digests() == b[0].digests()
        assert len(a[1].series("l_val_target_mse")[1]) == 3
        assert "best_combined" in a[0].counters

    def test_bad_cycle_rejected(self):
        with pytest.raises(ValueError):
            Phase3Config(minibatch_cycle=(KIND_SOURCE,) * 4)


def test_metrics_csv_roundtrip(tmp_path):
    log = MetricsLog(tmp_path / "m.csv")
    log.add(0, "phase1", "l_steering", 0.1 + 0.2)
    back = MetricsLog.read_csv(tmp_path / "m.csv")
    assert back.rows == log.rows
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "iteration,phase,loss_name,value"


def test_non_increasing_fraction():
    assert non_increasing_fraction([3, 2, 2, 4, 1]) == 0.75
    assert non_increasing_fraction([1.0]) == 1.0
