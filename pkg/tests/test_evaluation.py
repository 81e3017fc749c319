import numpy as np
import pytest
import torch

from steeradapt.evaluation import (
    DIRECT,
    TRANSLATE,
    MetricSummary,
    aare,
    compare_to_baseline,
    evaluate,
    format_report,
    summarize,
)
from steeradapt.data import with_labels_hidden
from steeradapt.training import new_net


def test_aare_zero_when_exact():
    assert aare([0.1, -0.2], [0.1, -0.2]) == 0.0


def test_aare_hand_case():
    assert aare([1.0, 3.0], [2.0, 4.0]) == 37.5


def test_aare_epsilon_clamp():
    assert aare([0.01], [0.0], epsilon=0.01) == 100.0


def test_aare_rejects_empty_and_mismatch():
    with pytest.raises(ValueError):
        aare([], [])
    with pytest.raises(ValueError):
        aare([1.0], [1.0, 2.0])


def test_constant_zero_predictor_mse(tiny_synth):
    y = tiny_synth.target_test.labels().astype(np.float64)
    zero = lambda x: torch.zeros(x.shape[0], 1)
    s = evaluate(zero, tiny_synth.target_test)
    assert s.mse == pytest.approx(float(np.mean(y ** 2)), rel=1e-12)
    assert s.n == len(y) and s.path == DIRECT


def test_perfect_stub_scores_zero():
    labels = np.array([0.1, -0.3, 0.25])
    s = summarize(labels.copy(), labels)
    assert s.mse == 0.0 and s.aare == 0.0


def test_identity_translator_matches_direct(tiny_synth):
    reg = new_net("regressor", 0, (1, 3, 16, 32))
    a = evaluate(reg, tiny_synth.target_test)
    b = evaluate(reg, tiny_synth.target_test, TRANSLATE, generator_t2s=lambda x: x)
    assert (a.mse, a.aare) == (b.mse, b.aare)


def test_translate_path_requires_generator(tiny_synth):
    with pytest.raises(ValueError):
        evaluate(lambda x: x[:, :1, 0, 0], tiny_synth.target_test, TRANSLATE)


def test_unlabelled_manifest_rejected(tiny_synth):
    with pytest.raises(ValueError):
        evaluate(lambda x: torch.zeros(x.shape[0], 1), with_labels_hidden(tiny_synth.target))


def test_evaluation_is_read_only(tiny_synth):
    reg = new_net("regressor", 0, (1, 3, 16, 32))
    before = reg.params.digest()
    evaluate(reg, tiny_synth.target_test)
    assert reg.params.digest() == before


def test_baseline_comparison_reproduces_reported_gaps():
    adapted = MetricSummary(mse=0.091, aare=31.43, n=10)
    baseline = MetricSummary(mse=0.23, aare=43.52, n=10)
    imp = compare_to_baseline(adapted, baseline)
    assert imp.aare_points == pytest.approx(12.09, abs=1e-9)
    assert imp.mse_delta == pytest.approx(0.139, abs=1e-12)
    assert imp.meets(10, 10)
    assert not compare_to_baseline(baseline, baseline).meets(10, 10)


def test_relative_bar_is_an_alternative():
    imp = compare_to_baseline(MetricSummary(0.1, 18.0, 4), MetricSummary(0.2, 25.0, 4))
    assert imp.aare_points == 7.0 and imp.aare_relative == pytest.approx(28.0)
    assert imp.meets(10, 10)


def test_aare_scale_consistency():
    rng = np.random.default_rng(0)
    y = rng.uniform(0.1, 1.0, 50)
    p = y + rng.normal(0, 0.05, 50)
    assert aare(3 * p, 3 * y, epsilon=0.03) == pytest.approx(aare(p, y, epsilon=0.01))


def test_metric_summary_invariants():
    with pytest.raises(ValueError):
        MetricSummary(0.0, 1.0, 0)
    with pytest.raises(ValueError):
        MetricSummary(0.0, -1.0, 3)


def test_report_layout():
    a, b = MetricSummary(0.082, 31.43, 5), MetricSummary(0.23, 43.52, 5)
    text = format_report(a, a, b, b)
    assert "Adversarially trained" in text and "Source regressor" in text
    assert "12.09 points" in text
