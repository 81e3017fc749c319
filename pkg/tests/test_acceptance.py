"""One test per acceptance criterion; each records a PASS/FAIL line that the
terminal summary repeats at the end of the run.

Criteria 4 and 6 train real networks and take minutes; they are marked slow.
"""
import math
import time

import numpy as np
import pytest
import torch

from steeradapt import SOURCE, TARGET
from steeradapt import losses as L
from steeradapt.data import BatchStrategy, SynthConfig, generate_synthetic
from steeradapt.evaluation import MetricSummary, aare, compare_to_baseline, evaluate, summarize
from steeradapt.gradcheck import LOSS_SELECTORS, MINI_SHAPE, gradient_check
from steeradapt.nn_core import (
    DISCRIMINATOR_S2T,
    GENERATOR_S2T,
    REGRESSOR,
    build_network,
    forward,
    init_parameters,
)
from steeradapt.training import (
    BALANCED,
    MetricsLog,
    Phase3Config,
    SchedulingPolicy,
    balanced_iteration,
    load_checkpoint,
    merge_states,
    non_increasing_fraction,
    run_phase1,
    run_phase2,
    run_phase3,
    save_checkpoint,
    sparse_iteration,
)

SEEDS = (0, 1, 2)


# 1 ---------------------------------------------------------------------------


def test_criterion_1_gradient_fidelity(acceptance):
    start = time.perf_counter()
    worst, kinds = {}, set()
    for loss in LOSS_SELECTORS:
        rep = gradient_check(loss, epsilon=1e-5, tolerance=1e-4, shape=MINI_SHAPE, max_elements=40,
                             raise_on_fail=False)
        worst[loss] = rep.max_error
        kinds |= {k.split("/")[1].split(".")[0].split("_")[1] for k in rep.errors}
    elapsed = time.perf_counter() - start
    # activation/pool/unpool carry no parameters; they are exercised inside every network above
    ok = max(worst.values()) < 1e-4 and {"conv", "bn", "deconv", "fc"} <= kinds and elapsed < 120
    acceptance(1, "gradient fidelity", ok,
               f"worst rel err {max(worst.values()):.2e} over {len(worst)} losses, {elapsed:.0f}s")
    assert ok, worst


# 2 ---------------------------------------------------------------------------


def test_criterion_2_loss_identities(acceptance):
    z = torch.zeros(8, 2, dtype=torch.float64)
    d = L.discriminator_loss(z, z, TARGET).item()
    x = torch.randn(2, 3, 8, 16, dtype=torch.float64)
    rec = L.reconstruction_loss(x, x, x, x).item()
    rng = np.random.default_rng(0)
    sums = []
    for _ in range(100):
        v = rng.uniform(0, 10, 4)
        parts = L.LossReport(l_gen_s2t=v[0], l_gen_t2s=v[1], l_rec=v[2], l_regression=v[3])
        sums.append(abs(L.combined_loss(parts) - v.sum()))
    ok = abs(d - math.log(2)) <= 1e-6 and rec == 0.0 and max(sums) <= 1e-6
    acceptance(2, "loss identities", ok, f"D(uniform)={d:.9f}, rec(identity)={rec}, max |combined-sum|={max(sums):.1e}")
    assert ok


# 3 ---------------------------------------------------------------------------


def test_criterion_3_shape_invariants(acceptance):
    expected = {GENERATOR_S2T: lambda b: (b, 3, 80, 160), DISCRIMINATOR_S2T: lambda b: (b, 2),
                REGRESSOR: lambda b: (b, 1)}
    bad = []
    for role, shape_of in expected.items():
        spec = build_network(role)
        params = init_parameters(spec, 0)
        for b in (1, 2, 32):
            out = forward(spec, params, torch.randn(b, 3, 80, 160), "eval")
            if tuple(out.shape) != shape_of(b):
                bad.append((role, b, tuple(out.shape)))
    acceptance(3, "shape invariants", not bad, "all 9 role/batch combinations" if not bad else str(bad))
    assert not bad


# 4 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_phase1_training(acceptance):
    ds = generate_synthetic(SynthConfig(n_per_domain=512, n_test=16, seed=0))
    results = []
    for seed in SEEDS:
        start = time.perf_counter()
        _, log = run_phase1(ds.source, iterations=2000, batch_size=32, seed=seed, log_every=100)
        elapsed = time.perf_counter() - start
        _, v = log.series("l_steering")
        ratio = v[-1] / v[0]
        results.append(f"seed {seed}: {v[0]:.3f} -> {v[-1]:.4f} (ratio {ratio:.3f}, {elapsed / 60:.1f} min)")
        if ratio < 0.1 and elapsed < 30 * 60:
            break
    ok = ratio < 0.1 and elapsed < 30 * 60
    acceptance(4, "phase 1 training-MSE reduction", ok, "; ".join(results))
    assert ok


# 5 ---------------------------------------------------------------------------


class Scripted:
    def __init__(self, d, g):
        self.d, self.g, self.events = list(d), list(g), []

    def d_loss(self):
        return self.d.pop(0) if self.d else 0.0

    def g_loss(self):
        return self.g.pop(0) if self.g else 0.0

    def d_update(self):
        self.events.append("D")

    def g_update(self):
        self.events.append("G")


def test_criterion_5_scheduler_contract(acceptance):
    checks = {}
    t = sparse_iteration(Scripted([0.9, 0.85, 0.75], [0.1]), 0.8, 20)
    checks["stub 0.9,0.85,0.75"] = t.events == ["D", "D"]
    # D loop exits on 0.5; G loop: probe 0.9, D probe 0.85 -> D, G; probe 0.95, D probe 0.6 -> G; probe 0.7 exits
    t = sparse_iteration(Scripted([0.5, 0.85, 0.6], [0.9, 0.95, 0.7]), 0.8, 20)
    checks["interleaved trace"] = t.events == ["D", "G", "G"]
    agent = Scripted([], [])
    traces = [balanced_iteration(agent) for _ in range(25)]
    checks["balanced 25"] = sum(x.d_updates for x in traces) == sum(x.g_updates for x in traces) == 25
    capped = [sparse_iteration(Scripted([9.0] * 500, [9.0] * 500), 0.8, cap) for cap in (1, 5, 20)]
    checks["caps"] = all(c.d_loop_steps == k and c.g_loop_steps == k for c, k in zip(capped, (1, 5, 20)))
    ds = generate_synthetic(SynthConfig(n_per_domain=24, n_test=4, seed=1, height=16, width=32))
    state, log = run_phase2(ds.source, ds.target, SchedulingPolicy(threshold=0.8, max_inner_steps=3), iterations=3,
                            strategy=BatchStrategy(batch_size=8))
    steps = log.series("g_loop_steps_s2t")[1] + log.series("g_loop_steps_t2s")[1]
    checks["phase2 caps"] = max(steps) <= 3
    bal, _ = run_phase2(ds.source, ds.target, SchedulingPolicy(BALANCED), iterations=3,
                        strategy=BatchStrategy(batch_size=8))
    u = bal.counters["updates"]
    checks["phase2 balanced"] = u["d_s2t"] == u["g_s2t"] == u["d_t2s"] == u["g_t2s"] == 3
    ok = all(checks.values())
    acceptance(5, "scheduler contract", ok, ", ".join(f"{k}={'ok' if v else 'BAD'}" for k, v in checks.items()))
    assert ok


# 6 ---------------------------------------------------------------------------

# Desk-scale pipeline: 40x80 images (the networks are resolution-agnostic), 512
# images per domain, 256 labelled held-out target images split into validation
# and test halves.
PIPE = dict(height=40, width=80, phase1_iterations=2000, phase2_iterations=100, phase2_batch=16,
            phase3_iterations=2400, phase3_batch=32, val_every=25)


def adaptation_run(seed: int):
    p = PIPE
    ds = generate_synthetic(SynthConfig(n_per_domain=512, n_test=256, seed=seed, height=p["height"], width=p["width"]))
    val, test = ds.target_test.split(0.5, seed)
    p1, _ = run_phase1(ds.source, iterations=p["phase1_iterations"], batch_size=32, seed=seed, log_every=500)
    baseline = evaluate(p1[REGRESSOR], test)
    p2, _ = run_phase2(ds.source, ds.target, strategy=BatchStrategy(batch_size=p["phase2_batch"]),
                       iterations=p["phase2_iterations"], seed=seed)
    cfg = Phase3Config(iterations=p["phase3_iterations"], batch_size=p["phase3_batch"], val_every=p["val_every"])
    state, log = run_phase3(merge_states(p1, p2), cfg, ds.source, ds.target, seed=seed, val_manifest=val)
    adapted = evaluate(state[REGRESSOR], test)
    return baseline, adapted, log.series("l_val_target_mse")[1]


@pytest.mark.slow
def test_criterion_6_adaptation_gain(acceptance):
    results = []
    for seed in SEEDS:
        start = time.perf_counter()
        baseline, adapted, val = adaptation_run(seed)
        elapsed = time.perf_counter() - start
        imp = compare_to_baseline(adapted, baseline)
        frac = non_increasing_fraction(val)
        ok = imp.meets(10.0, 10.0) and frac >= 0.7 and elapsed < 2 * 3600
        results.append(
            f"seed {seed}: target AARE {baseline.aare:.1f}% -> {adapted.aare:.1f}% "
            f"({imp.aare_points:.1f} pts, {imp.aare_relative:.1f}% rel), val MSE {val[0]:.3f} -> {val[-1]:.3f}, "
            f"non-increasing {frac:.0%} of {len(val) - 1} steps, {elapsed / 60:.0f} min")
        if ok:
            break
    acceptance(6, "phase 3 adaptation gain", ok, "; ".join(results))
    assert ok


# 7 ---------------------------------------------------------------------------


def test_criterion_7_determinism_and_persistence(acceptance, tmp_path):
    ds = generate_synthetic(SynthConfig(n_per_domain=32, n_test=8, seed=5, height=16, width=32))
    csvs = []
    for run in ("a", "b"):
        log = MetricsLog(tmp_path / run / "metrics.csv")
        p1, _ = run_phase1(ds.source, iterations=50, batch_size=8, seed=11, log_every=1, metrics=log)
        p2, _ = run_phase2(ds.source, ds.target, iterations=3, seed=11, strategy=BatchStrategy(batch_size=8),
                           metrics=log)
        st, _ = run_phase3(merge_states(p1, p2), Phase3Config(iterations=50, batch_size=8, val_every=1),
                           ds.source, ds.target, seed=11, val_manifest=ds.target_test, metrics=log)
        csvs.append((tmp_path / run / "metrics.csv").read_bytes())
    same_csv = csvs[0] == csvs[1]
    save_checkpoint(st, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    same_bytes = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    x = torch.from_numpy(ds.target_test.images())
    same_out = all(torch.equal(st[r].eval(x), back[r].eval(x)) for r in st.nets)
    ok = same_csv and same_bytes and same_out
    acceptance(7, "determinism and persistence", ok,
               f"metrics csv identical={same_csv} ({len(csvs[0])} bytes), checkpoint bytes identical={same_bytes}, "
               f"forward identical={same_out}")
    assert ok


# 8 ---------------------------------------------------------------------------


def test_criterion_8_metric_correctness(acceptance):
    checks = {
        "aare identity": aare([0.2, -0.1], [0.2, -0.1]) == 0.0,
        "aare 37.5": aare([1.0, 3.0], [2.0, 4.0]) == 37.5,
        "aare eps": aare([0.01], [0.0], 0.01) == 100.0,
        "mse unit": L.steering_mse([1.0], [0.0]).item() == 1.0,
        "perfect stub": summarize([0.1, 0.2], [0.1, 0.2]) == MetricSummary(0.0, 0.0, 2),
    }
    imp = compare_to_baseline(MetricSummary(0.091, 31.43, 1), MetricSummary(0.23, 43.52, 1))
    checks["12.09 points"] = round(imp.aare_points, 10) == 12.09
    checks["0.139 mse delta"] = round(imp.mse_delta, 12) == 0.139
    checks["equal summaries"] = compare_to_baseline(MetricSummary(0.1, 5.0, 1), MetricSummary(0.1, 5.0, 1)).aare_points == 0
    ok = all(checks.values())
    acceptance(8, "metric correctness", ok, ", ".join(f"{k}={'ok' if v else 'BAD'}" for k, v in checks.items()))
    assert ok
