"""Compare autograd gradients with central finite differences."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from . import SOURCE, TARGET
from . import losses as L
from .nn_core import (
    DISCRIMINATOR_S2T,
    GENERATOR_S2T,
    GENERATOR_T2S,
    REGRESSOR,
    ParameterSet,
    build_network,
    forward,
    init_parameters,
)

MINI_SHAPE = (2, 3, 8, 16)
# Finite-difference round-off at eps=1e-5 reaches ~4e-10 (e.g. conv biases
# feeding batch norm, whose true gradient is exactly zero). Gradients smaller
# than the floor are therefore compared absolutely, to tolerance * floor.
ABS_FLOOR = 1e-4

LOSS_SELECTORS = (
    "steering_mse",
    "discriminator",
    "generator_flipped",
    "generator_saturating",
    "reconstruction",
    "semantic_regression",
    "combined",
)


class GradientCheckError(AssertionError):
    def __init__(self, report: "GradCheckReport"):
        self.report = report
        worst = ", ".join(f"{k}={v:.3g}" for k, v in report.worst(5))
        super().__init__(f"gradient check '{report.loss}' failed at tolerance {report.tolerance:g}: {worst}")


@dataclass
class GradCheckReport:
    loss: str
    tolerance: float
    epsilon: float
    errors: dict[str, float] = field(default_factory=dict)  # "role/entry" -> max relative error
    checked: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def worst(self, n: int = 5) -> list[tuple[str, float]]:
        return sorted(self.errors.items(), key=lambda kv: -kv[1])[:n]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR)
    return np.abs(analytic - numeric) / scale


def compare_gradients(
    loss_fn: Callable[[], torch.Tensor],
    networks: dict[str, ParameterSet],
    epsilon: float = 1e-5,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> tuple[dict[str, float], int]:
    """Max relative error per parameter entry, plus number of elements probed.

    ``loss_fn`` must be deterministic and must not mutate running statistics.
    With ``max_elements`` a seeded subset of each entry is probed.
    """
    rng = np.random.default_rng(seed)
    for params in networks.values():
        params.zero_grad()
    loss_fn().backward()
    errors, checked = {}, 0
    for role, params in networks.items():
        for name in params.trainable_names():
            tensor = params.entries[name]
            analytic = tensor.grad.detach().reshape(-1).numpy().copy() if tensor.grad is not None \
                else np.zeros(tensor.numel())
            n = tensor.numel()
            idx = np.arange(n) if max_elements is None or n <= max_elements \
                else np.sort(rng.choice(n, max_elements, replace=False))
            flat = tensor.data.view(-1)
            numeric = np.empty(len(idx))
            with torch.no_grad():
                for j, i in enumerate(idx):
                    orig = flat[i].item()
                    flat[i] = orig + epsilon
                    up = loss_fn().item()
                    flat[i] = orig - epsilon
                    down = loss_fn().item()
                    flat[i] = orig
                    numeric[j] = (up - down) / (2 * epsilon)
            errors[f"{role}/{name}"] = float(relative_error(analytic[idx], numeric).max())
            checked += len(idx)
    return errors, checked


def _mini_networks(roles, shape, seed, activation=None):
    nets = {}
    for k, role in enumerate(roles):
        spec = build_network(role, shape, activation=activation)
        nets[role] = (spec, init_parameters(spec, seed + k, torch.float64))
    return nets


def build_loss_closure(loss: str, shape=MINI_SHAPE, seed: int = 0, activation: Optional[str] = None):
    """Miniature float64 networks plus a closure evaluating ``loss`` on them."""
    if loss not in LOSS_SELECTORS:
        raise ValueError(f"unknown loss selector {loss!r}; expected one of {', '.join(LOSS_SELECTORS)}")
    g = torch.Generator().manual_seed(seed + 1000)
    x_s = torch.randn(shape, generator=g, dtype=torch.float64)
    x_t = torch.randn(shape, generator=g, dtype=torch.float64)
    y = 0.5 * torch.randn(shape[0], generator=g, dtype=torch.float64)

    def run(nets, role, x):
        spec, params = nets[role]
        return forward(spec, params, x, "train", track_stats=False)

    if loss == "steering_mse":
        nets = _mini_networks([REGRESSOR], shape, seed, activation)
        fn = lambda: L.steering_mse(run(nets, REGRESSOR, x_s), y)
    elif loss == "discriminator":
        nets = _mini_networks([DISCRIMINATOR_S2T], shape, seed, activation)
        fn = lambda: L.discriminator_loss(run(nets, DISCRIMINATOR_S2T, x_t), run(nets, DISCRIMINATOR_S2T, x_s), TARGET)
    elif loss.startswith("generator_"):
        kind = loss.split("_", 1)[1]
        nets = _mini_networks([GENERATOR_S2T, DISCRIMINATOR_S2T], shape, seed, activation)
        fn = lambda: L.generator_loss(run(nets, DISCRIMINATOR_S2T, run(nets, GENERATOR_S2T, x_s)), kind, TARGET)
    elif loss == "reconstruction":
        nets = _mini_networks([GENERATOR_S2T, GENERATOR_T2S], shape, seed, activation)

        def fn():
            cyc_s = run(nets, GENERATOR_T2S, run(nets, GENERATOR_S2T, x_s))
            cyc_t = run(nets, GENERATOR_S2T, run(nets, GENERATOR_T2S, x_t))
            return L.reconstruction_loss(x_s, cyc_s, x_t, cyc_t)
    elif loss == "semantic_regression":
        nets = _mini_networks([REGRESSOR, GENERATOR_S2T], shape, seed, activation)
        fn = lambda: L.semantic_regression_loss(
            run(nets, REGRESSOR, x_s), run(nets, REGRESSOR, run(nets, GENERATOR_S2T, x_s)), y)
    else:
        from .nn_core import DISCRIMINATOR_T2S
        nets = _mini_networks(
            [REGRESSOR, GENERATOR_S2T, GENERATOR_T2S, DISCRIMINATOR_S2T, DISCRIMINATOR_T2S], shape, seed, activation)

        def fn():
            fake_t = run(nets, GENERATOR_S2T, x_s)
            fake_s = run(nets, GENERATOR_T2S, x_t)
            parts = L.LossReport(
                l_gen_s2t=L.generator_loss(run(nets, DISCRIMINATOR_S2T, fake_t), L.FLIPPED, TARGET),
                l_gen_t2s=L.generator_loss(run(nets, DISCRIMINATOR_T2S, fake_s), L.FLIPPED, SOURCE),
                l_rec=L.reconstruction_loss(
                    x_s, run(nets, GENERATOR_T2S, fake_t), x_t, run(nets, GENERATOR_S2T, fake_s)),
                l_regression=L.semantic_regression_loss(run(nets, REGRESSOR, x_s), run(nets, REGRESSOR, fake_t), y),
            )
            return L.combined_loss(parts)
    return nets, fn


def gradient_check(
    loss: str = "steering_mse",
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    shape=MINI_SHAPE,
    seed: int = 0,
    max_elements: Optional[int] = None,
    activation: Optional[str] = None,
    raise_on_fail: bool = True,
) -> GradCheckReport:
    """Finite-difference check of every parameter entry touched by ``loss``."""
    nets, fn = build_loss_closure(loss, shape, seed, activation)
    errors, checked = compare_gradients(
        fn, {role: params for role, (_, params) in nets.items()}, epsilon, max_elements, seed)
    report = GradCheckReport(loss, tolerance, epsilon, errors, checked)
    if raise_on_fail and not report.passed:
        raise GradientCheckError(report)
    return report
