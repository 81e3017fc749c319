"""Steering metrics, the two target-domain evaluation paths, baseline comparison."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import DatasetManifest
from .losses import steering_mse
from .training import Net

DIRECT = "direct"
TRANSLATE = "translate_then_regress"
AARE_EPSILON = 0.01


def aare(predictions, labels, epsilon: float = AARE_EPSILON) -> float:
    """Average absolute relative error in percent, ``|p - y| / max(|y|, epsilon)``."""
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("aare of an empty batch")
    if p.size != y.size:
        raise ValueError(f"aare: {p.size} predictions vs {y.size} labels")
    return float(100.0 * np.mean(np.abs(p - y) / np.maximum(np.abs(y), epsilon)))


@dataclass(frozen=True)
class MetricSummary:
    mse: float
    aare: float
    n: int
    path: str = DIRECT
    dataset: str = ""

    def __post_init__(self):
        if self.n < 1 or self.aare < 0:
            raise ValueError("MetricSummary needs n >= 1 and aare >= 0")


def summarize(predictions, labels, path: str = DIRECT, dataset: str = "", epsilon: float = AARE_EPSILON):
    mse = float(steering_mse(np.asarray(predictions, dtype=np.float64), np.asarray(labels, dtype=np.float64)))
    return MetricSummary(mse, aare(predictions, labels, epsilon), len(np.asarray(labels).reshape(-1)), path, dataset)


def predict_path(regressor, images: np.ndarray, path: str = DIRECT, generator_t2s=None,
                 batch_size: int = 64) -> np.ndarray:
    """Regressor outputs on raw target images or on their translation to the source domain.

    ``regressor`` and ``generator_t2s`` are :class:`~steeradapt.training.Net`
    objects or plain callables mapping an image tensor to outputs.
    """
    if path not in (DIRECT, TRANSLATE):
        raise ValueError(f"unknown evaluation path {path!r}")
    if path == TRANSLATE and generator_t2s is None:
        raise ValueError("translate_then_regress needs a target-to-source generator")
    reg = regressor.eval if isinstance(regressor, Net) else regressor
    gen = generator_t2s.eval if isinstance(generator_t2s, Net) else generator_t2s
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[i:i + batch_size]))
            if path == TRANSLATE:
                x = gen(x)
            out.append(reg(x).reshape(-1).double().numpy())
    return np.concatenate(out)


def evaluate(regressor, manifest: DatasetManifest, path: str = DIRECT, generator_t2s=None,
             epsilon: float = AARE_EPSILON, dataset: str = "") -> MetricSummary:
    """MSE and AARE of the regressor on a labelled held-out manifest. Read-only."""
    labels = manifest.labels()
    if len(labels) == 0 or np.isnan(labels).any():
        raise ValueError("evaluate needs a non-empty, fully labelled manifest")
    preds = predict_path(regressor, manifest.images(), path, generator_t2s)
    return summarize(preds, labels, path, dataset or manifest.domain, epsilon)


@dataclass(frozen=True)
class Improvement:
    mse_delta: float  # baseline - adapted; positive means better
    aare_points: float  # baseline - adapted, percentage points
    aare_relative: float  # aare_points / baseline, percent

    def meets(self, points: float, relative: float) -> bool:
        """True if either the absolute or the relative AARE gain reaches its bar."""
        return self.aare_points >= points or self.aare_relative >= relative


def compare_to_baseline(adapted: MetricSummary, baseline: MetricSummary) -> Improvement:
    points = baseline.aare - adapted.aare
    rel = 100.0 * points / baseline.aare if baseline.aare > 0 else 0.0
    return Improvement(baseline.mse - adapted.mse, points, rel)


def format_report(adapted_val: MetricSummary, adapted_test: MetricSummary,
                  baseline_val: MetricSummary, baseline_test: MetricSummary) -> str:
    """Two-row table: adapted vs source-only regressor on validation and test sets."""
    imp = compare_to_baseline(adapted_test, baseline_test)
    head = f"{'':<26}{'Val MSELoss':>12}{'Val AARE':>11}{'Test MSELoss':>14}{'Test AARE':>11}"
    rows = [head]
    for label, v, t in (("Adversarially trained", adapted_val, adapted_test),
                        ("Source regressor", baseline_val, baseline_test)):
        rows.append(f"{label:<26}{v.mse:>12.4f}{v.aare:>10.2f}%{t.mse:>14.4f}{t.aare:>10.2f}%")
    rows.append("")
    rows.append(f"test AARE improvement: {imp.aare_points:.2f} points ({imp.aare_relative:.2f}% relative)")
    rows.append(f"test MSE decrease: {imp.mse_delta:.4f}")
    return "\n".join(rows) + "\n"


def write_report(path, adapted_val, adapted_test, baseline_val, baseline_test) -> Path:
    path = Path(path)
    path.write_text(format_report(adapted_val, adapted_test, baseline_val, baseline_test), encoding="utf-8")
    return path


def append_summary(metrics, iteration: int, phase: str, name: str, summary: MetricSummary) -> None:
    metrics.add(iteration, phase, f"{name}_mse_{summary.path}", summary.mse)
    metrics.add(iteration, phase, f"{name}_aare_{summary.path}", summary.aare)


LOSS_PAIRS = (
    ("steering", ("l_steering", "l_val_steering")),
    ("gan_s2t", ("l_disc_s2t", "l_gen_s2t")),
    ("gan_t2s", ("l_disc_t2s", "l_gen_t2s")),
    ("reconstruction", ("l_rec",)),
    ("objective", ("l_combined", "l_regression")),
    ("validation", ("l_val_target_mse",)),
)


def plot_loss_curves(metrics, out_dir) -> list[Path]:
    """One PNG per loss pair found in ``metrics`` (a MetricsLog); returns written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    present = set(metrics.names())
    written = []
    for title, names in LOSS_PAIRS:
        names = [n for n in names if n in present]
        if not names:
            continue
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for n in names:
            phases = sorted({r[1] for r in metrics.rows if r[2] == n})
            for ph in phases:
                xs, ys = metrics.series(n, ph)
                ax.plot(xs, ys, label=n if len(phases) == 1 else f"{n} ({ph})")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{title}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        written.append(path)
    return written
