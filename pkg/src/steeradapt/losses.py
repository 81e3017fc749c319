"""Scalar training objectives.

All functions take and return torch tensors so they stay differentiable;
plain sequences are accepted for convenience and converted to float64.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
import torch.nn.functional as F

from . import DOMAIN_CLASS, SOURCE, TARGET

PROB_CLAMP = 1e-7
SATURATING = "saturating"
FLIPPED = "flipped"
GENERATOR_OBJECTIVES = (SATURATING, FLIPPED)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _other(domain: str) -> str:
    if domain not in DOMAIN_CLASS:
        raise ValueError(f"unknown domain {domain!r}")
    return TARGET if domain == SOURCE else SOURCE


def steering_mse(predictions, labels) -> torch.Tensor:
    """Mean squared steering error, radians squared."""
    p, y = _as_tensor(predictions).reshape(-1), _as_tensor(labels).reshape(-1)
    if p.numel() == 0:
        raise ValueError("steering_mse of an empty batch")
    if p.numel() != y.numel():
        raise ValueError(f"steering_mse: {p.numel()} predictions vs {y.numel()} labels")
    return ((p - y.to(p.dtype)) ** 2).mean()


def _check_logits(logits: torch.Tensor, what: str) -> torch.Tensor:
    logits = _as_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ValueError(f"{what} must have shape (B, 2), got {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise ValueError(f"{what} contains non-finite values")
    return logits


def discriminator_loss(logits_real, logits_fake, domain_of_real: str) -> torch.Tensor:
    """Mean softmax cross-entropy of a discriminator.

    Real samples are labelled with their own domain; fakes with the domain
    they were synthesized *from* (the other one). Either batch may be
    ``None`` when a minibatch holds only one kind. The mean runs over every
    sample supplied, so a maximally confused discriminator scores ln 2.
    """
    fake_domain = _other(domain_of_real)
    parts, targets = [], []
    if logits_real is not None:
        lr = _check_logits(logits_real, "logits_real")
        parts.append(lr)
        targets.append(torch.full((lr.shape[0],), DOMAIN_CLASS[domain_of_real], dtype=torch.long))
    if logits_fake is not None:
        lf = _check_logits(logits_fake, "logits_fake")
        parts.append(lf)
        targets.append(torch.full((lf.shape[0],), DOMAIN_CLASS[fake_domain], dtype=torch.long))
    if not parts or sum(p.shape[0] for p in parts) == 0:
        raise ValueError("discriminator_loss needs at least one sample")
    return F.cross_entropy(torch.cat(parts), torch.cat(targets))


def generator_loss(logits_fake, kind: str = FLIPPED, fool_as: str = TARGET) -> torch.Tensor:
    """Generator objective, to be minimized.

    ``fool_as`` is the domain the generator wants its output classified as
    (target for the source-to-target generator). ``saturating`` is
    ``mean log(1 - p)``, ``flipped`` is ``mean -log p``.
    """
    if kind not in GENERATOR_OBJECTIVES:
        raise ValueError(f"unknown generator objective {kind!r}")
    logits = _check_logits(logits_fake, "logits_fake")
    log_p = F.log_softmax(logits, dim=1)
    k = DOMAIN_CLASS[fool_as]
    if kind == SATURATING:
        return _clamped_log(log_p[:, 1 - k]).mean()  # log(1 - p)
    return -_clamped_log(log_p[:, k]).mean()


def _clamped_log(log_q: torch.Tensor) -> torch.Tensor:
    # The value is log of q clamped to [PROB_CLAMP, 1 - PROB_CLAMP]; the gradient
    # is that of the exact log-probability, so a saturated discriminator still
    # passes a signal back to the generator.
    lo, hi = math.log(PROB_CLAMP), math.log1p(-PROB_CLAMP)
    return log_q + (log_q.detach().clamp(lo, hi) - log_q.detach())


def reconstruction_loss(x_s, x_s_cycled, x_t, x_t_cycled) -> torch.Tensor:
    """Cycle L1: element-mean |cycled - original| summed over both directions.

    Either direction pair may be ``None`` to evaluate one half only.
    """
    total = None
    for orig, cyc in ((x_s, x_s_cycled), (x_t, x_t_cycled)):
        if orig is None and cyc is None:
            continue
        orig, cyc = _as_tensor(orig), _as_tensor(cyc)
        if orig.shape != cyc.shape:
            raise ValueError(f"reconstruction_loss: shape {tuple(cyc.shape)} vs original {tuple(orig.shape)}")
        term = (cyc - orig.to(cyc.dtype)).abs().mean()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("reconstruction_loss needs at least one direction")
    return total


def semantic_regression_loss(pred_source, pred_translated, labels) -> torch.Tensor:
    return steering_mse(pred_source, labels) + steering_mse(pred_translated, labels)


@dataclass
class LossReport:
    """Named scalar losses for one logged step; ``None`` means not computed."""

    l_steering: Optional[float] = None
    l_disc_s2t: Optional[float] = None
    l_gen_s2t: Optional[float] = None
    l_disc_t2s: Optional[float] = None
    l_gen_t2s: Optional[float] = None
    l_rec: Optional[float] = None
    l_regression: Optional[float] = None
    l_combined: Optional[float] = None

    def items(self):
        return [(k, v) for k, v in asdict(self).items() if v is not None]

    def check_finite(self) -> None:
        bad = [k for k, v in self.items() if not math.isfinite(v)]
        if bad:
            raise FloatingPointError(f"non-finite losses: {', '.join(bad)}")


@dataclass(frozen=True)
class LossWeights:
    gan_s2t: float = 1.0
    gan_t2s: float = 1.0
    rec: float = 1.0
    regression: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


COMBINED_PARTS = ("l_gen_s2t", "l_gen_t2s", "l_rec", "l_regression")


def combined_loss(parts: LossReport, weights: LossWeights = LossWeights()):
    """Weighted sum of both adversarial terms, cycle loss and regression loss.

    The adversarial terms are the generators' objectives, i.e. the quantity
    the outer minimization acts on. Works on floats or tensors.
    """
    if isinstance(weights, (tuple, list)):
        weights = LossWeights(*weights)
    values = [getattr(parts, name) for name in COMBINED_PARTS]
    missing = [n for n, v in zip(COMBINED_PARTS, values) if v is None]
    if missing:
        raise ValueError(f"combined_loss missing parts: {', '.join(missing)}")
    w = (weights.gan_s2t, weights.gan_t2s, weights.rec, weights.regression)
    return sum(wi * vi for wi, vi in zip(w, values))
