"""The three training phases, their schedulers and persisted state."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol

import numpy as np
import torch

from . import SOURCE, TARGET
from . import checkpoint as ckpt
from . import losses as L
from .data import SEPARATE, BatchStrategy, DatasetManifest, make_batches
from .nn_core import (
    DISCRIMINATOR_S2T,
    DISCRIMINATOR_SHARED,
    DISCRIMINATOR_T2S,
    GENERATOR_S2T,
    GENERATOR_T2S,
    REGRESSOR,
    NetworkSpec,
    ParameterSet,
    TensorShape,
    build_network,
    forward,
    init_parameters,
)

logger = logging.getLogger(__name__)

BALANCED = "balanced"
SPARSE = "sparse"

KIND_SOURCE = "source"
KIND_SYNTH_SOURCE = "synth_source_from_target"
KIND_TARGET = "target"
KIND_SYNTH_TARGET = "synth_target_from_source"
MINIBATCH_KINDS = (KIND_SOURCE, KIND_SYNTH_SOURCE, KIND_TARGET, KIND_SYNTH_TARGET)

SEPARATE_DISCRIMINATORS = "separate"
SHARED_DISCRIMINATOR = "shared"


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, checkpoint_path: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


@dataclass(frozen=True)
class SchedulingPolicy:
    kind: str = SPARSE
    threshold: float = 0.8
    max_inner_steps: int = 20

    def __post_init__(self):
        if self.kind not in (BALANCED, SPARSE):
            raise ValueError(f"unknown scheduling policy {self.kind!r}")
        if not self.threshold > 0:
            raise ValueError(f"threshold must be > 0, got {self.threshold}")
        if self.max_inner_steps < 1:
            raise ValueError("max_inner_steps must be >= 1")


@dataclass(frozen=True)
class Phase3Config:
    discriminator_mode: str = SEPARATE_DISCRIMINATORS
    minibatch_cycle: tuple = MINIBATCH_KINDS
    weights: L.LossWeights = L.LossWeights()
    iterations: int = 400  # minibatches; one cycle is len(minibatch_cycle)
    batch_size: int = 32
    generator_objective: str = L.FLIPPED
    val_every: int = 10  # cycles between validation passes
    optimizer: OptimizerConfig = OptimizerConfig()

    def __post_init__(self):
        if self.discriminator_mode not in (SEPARATE_DISCRIMINATORS, SHARED_DISCRIMINATOR):
            raise ValueError(f"unknown discriminator mode {self.discriminator_mode!r}")
        if sorted(self.minibatch_cycle) != sorted(MINIBATCH_KINDS):
            raise ValueError(f"minibatch_cycle must be a permutation of {MINIBATCH_KINDS}")
        if self.iterations < 0 or self.batch_size < 1 or self.val_every < 1:
            raise ValueError("iterations >= 0, batch_size >= 1 and val_every >= 1 required")


# --------------------------------------------------------------------------
# networks and state


@dataclass
class Net:
    spec: NetworkSpec
    params: ParameterSet
    optimizer: Optional[torch.optim.Optimizer] = None
    updates: int = 0

    def __call__(self, x: torch.Tensor, track_stats: bool = True) -> torch.Tensor:
        return forward(self.spec, self.params, x, "train", track_stats)

    def eval(self, x: torch.Tensor) -> torch.Tensor:
        return forward(self.spec, self.params, x, "eval")

    def attach_optimizer(self, cfg: OptimizerConfig) -> None:
        if self.optimizer is None:
            self.optimizer = torch.optim.Adam(
                self.params.trainable(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> None:
        self.optimizer.step()
        self.updates += 1

    def clone(self, cfg: OptimizerConfig) -> "Net":
        net = Net(self.spec, self.params.clone(), updates=self.updates)
        if self.optimizer is not None:
            net.attach_optimizer(cfg)
            net.optimizer.load_state_dict(_clone_opt_state(self.optimizer.state_dict()))
        return net


def _clone_opt_state(sd: dict) -> dict:
    return {
        "state": {k: {n: (t.clone() if torch.is_tensor(t) else t) for n, t in v.items()} for k, v in sd["state"].items()},
        "param_groups": [dict(g) for g in sd["param_groups"]],
    }


@dataclass
class TrainState:
    nets: dict[str, Net]
    optimizer: OptimizerConfig = OptimizerConfig()
    phase: str = "init"
    iteration: int = 0
    seed: int = 0
    config_digest: str = ""
    counters: dict = field(default_factory=dict)

    def __getitem__(self, role: str) -> Net:
        return self.nets[role]

    def digests(self) -> dict[str, str]:
        return {role: net.params.digest() for role, net in self.nets.items()}

    def copy(self) -> "TrainState":
        return TrainState(
            {r: n.clone(self.optimizer) for r, n in self.nets.items()},
            self.optimizer, self.phase, self.iteration, self.seed, self.config_digest,
            json_roundtrip(self.counters),
        )


def json_roundtrip(obj):
    import json
    return json.loads(json.dumps(obj))


def new_net(role: str, seed: int, input_shape, activation: Optional[str] = None) -> Net:
    spec = build_network(role, input_shape, activation=activation)
    return Net(spec, init_parameters(spec, seed))


def merge_states(*states: TrainState, optimizer: Optional[OptimizerConfig] = None) -> TrainState:
    """Combine networks from several states (later states win); optimizer moments are dropped."""
    nets = {}
    for s in states:
        for role, net in s.nets.items():
            nets[role] = Net(net.spec, net.params.clone())
    first = states[0]
    return TrainState(nets, optimizer or first.optimizer, "merged", 0, first.seed, first.config_digest, {})


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, path) -> None:
    header = {
        "phase": state.phase,
        "iteration": state.iteration,
        "seed": state.seed,
        "counters": state.counters,
        "optimizer": asdict(state.optimizer),
        "specs": {role: net.spec.to_dict() for role, net in state.nets.items()},
        "updates": {role: net.updates for role, net in state.nets.items()},
        "has_optimizer": {role: net.optimizer is not None for role, net in state.nets.items()},
    }
    arrays = {}
    for role, net in state.nets.items():
        for name, t in net.params.entries.items():
            arrays[f"net/{role}/{name}"] = t.detach().cpu().numpy()
        if net.optimizer is not None:
            names = net.params.trainable_names()
            for idx, slot in net.optimizer.state_dict()["state"].items():
                for key, val in slot.items():
                    arrays[f"opt/{role}/{names[idx]}/{key}"] = val.detach().cpu().numpy().astype(np.float32) \
                        if torch.is_tensor(val) else np.asarray(val, dtype=np.float32)
    ckpt.write_atomic(path, ckpt.encode(state.config_digest, header, arrays))


def load_checkpoint(path, expect_digest: Optional[str] = None) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    digest, header, arrays = ckpt.decode(path.read_bytes())
    if expect_digest is not None and digest != expect_digest:
        raise ckpt.CheckpointError(f"config digest mismatch: checkpoint {digest[:12]} vs run {expect_digest[:12]}")
    opt_cfg = OptimizerConfig(**header["optimizer"])
    nets = {}
    for role, spec_d in header["specs"].items():
        spec = NetworkSpec.from_dict(spec_d)
        prefix = f"net/{role}/"
        entries = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
        params = ParameterSet(dict(sorted(entries.items(), key=lambda kv: _entry_order(spec, kv[0]))))
        for name in params.trainable_names():
            params.entries[name].requires_grad_(True)
        net = Net(spec, params, updates=header["updates"][role])
        if header["has_optimizer"][role]:
            net.attach_optimizer(opt_cfg)
            names = params.trainable_names()
            state = {}
            for idx, name in enumerate(names):
                slot = {}
                for key in ("step", "exp_avg", "exp_avg_sq"):
                    k = f"opt/{role}/{name}/{key}"
                    if k in arrays:
                        slot[key] = torch.from_numpy(arrays[k].copy())
                if slot:
                    state[idx] = slot
            sd = net.optimizer.state_dict()
            sd["state"] = state
            net.optimizer.load_state_dict(sd)
        nets[role] = net
    return TrainState(nets, opt_cfg, header["phase"], header["iteration"], header["seed"], digest, header["counters"])


def _entry_order(spec: NetworkSpec, entry: str) -> tuple:
    layer, suffix = entry.rsplit(".", 1)
    names = [l.name for l in spec.layers]
    suffixes = ("weight", "bias", "scale", "shift", "running_mean", "running_var")
    return names.index(layer), suffixes.index(suffix)


# --------------------------------------------------------------------------
# metrics


class MetricsLog:
    """Rows of ``iteration,phase,loss_name,value``."""

    HEADER = ("iteration", "phase", "loss_name", "value")

    def __init__(self, path: Optional[Path] = None):
        self.rows: list[tuple[int, str, str, float]] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.HEADER)

    def add(self, iteration: int, phase: str, name: str, value: float) -> None:
        row = (int(iteration), phase, name, float(value))
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[0], row[1], row[2], repr(row[3])])

    def add_report(self, iteration: int, phase: str, report: L.LossReport) -> None:
        for name, value in report.items():
            self.add(iteration, phase, name, value)

    def series(self, name: str, phase: Optional[str] = None) -> tuple[list[int], list[float]]:
        rows = [r for r in self.rows if r[2] == name and (phase is None or r[1] == phase)]
        return [r[0] for r in rows], [r[3] for r in rows]

    def names(self) -> list[str]:
        return sorted({r[2] for r in self.rows})

    @staticmethod
    def read_csv(path) -> "MetricsLog":
        log = MetricsLog()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.rows.append((int(row["iteration"]), row["phase"], row["loss_name"], float(row["value"])))
        return log


def _check_finite(values: dict, state: TrainState, diag_path: Optional[Path]) -> None:
    bad = [k for k, v in values.items() if v is not None and not math.isfinite(v)]
    if not bad:
        return
    saved = None
    if diag_path is not None:
        state.phase = f"{state.phase}-diverged"
        save_checkpoint(state, diag_path)
        saved = diag_path
    raise TrainingDiverged(
        f"non-finite loss ({', '.join(bad)}) at iteration {state.iteration}"
        + (f"; diagnostic checkpoint at {saved}" if saved else ""), saved)


# --------------------------------------------------------------------------
# phase 1


def evaluate_mse(net: Net, manifest: DatasetManifest, batch_size: int = 64) -> float:
    labels = manifest.labels()
    if np.isnan(labels).any():
        raise ValueError(f"{manifest.domain} manifest has unlabeled records")
    preds = predict(net, manifest.images(), batch_size)
    return float(np.mean((preds - labels.astype(np.float64)) ** 2))


def predict(net: Net, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(net.eval(torch.from_numpy(images[i:i + batch_size])).reshape(-1).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def run_phase1(
    manifest: DatasetManifest,
    optimizer: OptimizerConfig = OptimizerConfig(),
    iterations: int = 5000,
    batch_size: int = 32,
    seed: int = 0,
    log_every: int = 50,
    val_fraction: float = 0.1,
    state: Optional[TrainState] = None,
    activation: Optional[str] = None,
    config_digest: str = "",
    metrics: Optional[MetricsLog] = None,
    diag_path: Optional[Path] = None,
) -> tuple[TrainState, MetricsLog]:
    """Supervised regressor training on the labelled source domain.

    Logs the mean training-batch MSE over each interval (the first interval
    is iteration 0 alone) and the held-out MSE in eval mode.
    """
    unlabeled = [r.id for r in manifest.records if r.trainable_label is None]
    if unlabeled:
        raise ValueError(f"phase 1 needs labelled records; {unlabeled[0]} has no steering label")
    metrics = metrics if metrics is not None else MetricsLog()
    train, val = manifest.split(val_fraction, seed)
    shape = TensorShape(1, *manifest.image_shape())
    if state is None:
        state = TrainState({REGRESSOR: new_net(REGRESSOR, seed, shape, activation)}, optimizer,
                           "phase1", 0, seed, config_digest, {})
    state.phase = "phase1"
    net = state[REGRESSOR]
    net.attach_optimizer(state.optimizer)
    stream = make_batches(train, BatchStrategy(SEPARATE, batch_size), seed)
    stream.fast_forward(state.counters.get("stream", {}))
    window: list[float] = []
    for it in range(state.iteration, iterations):
        batch = stream.next()
        net.zero_grad()
        loss = L.steering_mse(net(batch.images), batch.labels)
        loss.backward()
        net.step()
        window.append(loss.item())
        state.iteration = it + 1
        state.counters["stream"] = stream.state()
        if it % log_every == 0 or it == iterations - 1:
            values = {"l_steering": float(np.mean(window)), "l_val_steering": evaluate_mse(net, val) if len(val) else None}
            _check_finite(values, state, diag_path)
            for name, v in values.items():
                if v is not None:
                    metrics.add(it, "phase1", name, v)
            window = []
    return state, metrics


# --------------------------------------------------------------------------
# phase 2 scheduling


class AdversarialAgent(Protocol):
    """What the schedulers drive; losses are evaluated on a fresh batch."""

    def d_loss(self) -> float: ...
    def d_update(self) -> None: ...
    def g_loss(self) -> float: ...
    def g_update(self) -> None: ...


@dataclass
class IterationTrace:
    events: list[str] = field(default_factory=list)  # "D" / "G" per applied update
    d_loop_steps: int = 0
    g_loop_steps: int = 0
    interleaved_d: int = 0
    d_capped: bool = False
    g_capped: bool = False

    @property
    def d_updates(self) -> int:
        return self.events.count("D")

    @property
    def g_updates(self) -> int:
        return self.events.count("G")


def balanced_iteration(agent: AdversarialAgent) -> IterationTrace:
    trace = IterationTrace()
    agent.d_loss()
    agent.d_update()
    trace.events.append("D")
    agent.g_loss()
    agent.g_update()
    trace.events.append("G")
    return trace


def sparse_iteration(agent: AdversarialAgent, threshold: float, max_inner_steps: int) -> IterationTrace:
    """Threshold-gated updates: D trains only while its loss stays at or above
    ``threshold``; then G trains while its own loss does, with an interleaved
    D update whenever D's loss is back above the threshold. Each loop is
    capped at ``max_inner_steps`` bodies.
    """
    trace = IterationTrace()
    while agent.d_loss() >= threshold:
        if trace.d_loop_steps >= max_inner_steps:
            trace.d_capped = True
            break
        agent.d_update()
        trace.events.append("D")
        trace.d_loop_steps += 1
    while agent.g_loss() >= threshold:
        if trace.g_loop_steps >= max_inner_steps:
            trace.g_capped = True
            break
        if agent.d_loss() >= threshold:
            agent.d_update()
            trace.events.append("D")
            trace.interleaved_d += 1
        agent.g_update()
        trace.events.append("G")
        trace.g_loop_steps += 1
    return trace


class AdversarialPair:
    """One generator/discriminator pair bound to a batch stream.

    ``direction`` is ``"s2t"`` (generator maps source to target) or ``"t2s"``.
    The discriminator's real class is the generator's output domain; fakes
    are labelled with the domain they were synthesized from. With
    ``reverse`` set, the generator step adds the one-directional cycle loss
    through the opposite generator (which is not updated here).
    """

    def __init__(self, direction: str, gen: Net, disc: Net, stream, objective: str = L.FLIPPED,
                 reverse: Optional[Net] = None, rec_weight: float = 1.0):
        if direction not in ("s2t", "t2s"):
            raise ValueError(direction)
        self.direction = direction
        self.input_domain, self.output_domain = (SOURCE, TARGET) if direction == "s2t" else (TARGET, SOURCE)
        self.gen, self.disc, self.stream = gen, disc, stream
        self.objective, self.reverse, self.rec_weight = objective, reverse, rec_weight
        self._d_pending = None
        self._g_pending = None
        self._d_version = 0
        self.last = {"disc": None, "gen": None, "rec": None}

    def _d_objective(self, batch):
        real = batch.select(self.output_domain)
        src = batch.select(self.input_domain)
        logits_real = self.disc(real.images) if real is not None else None
        logits_fake = None
        if src is not None:
            with torch.no_grad():
                fake = self.gen(src.images, track_stats=False)
            logits_fake = self.disc(fake)
        return L.discriminator_loss(logits_real, logits_fake, self.output_domain)

    def _g_objective(self, x):
        fake = self.gen(x)
        gen = L.generator_loss(self.disc(fake, track_stats=False), self.objective, self.output_domain)
        rec = None
        if self.reverse is not None and self.rec_weight > 0:
            rec = L.reconstruction_loss(x, self.reverse(fake, track_stats=False), None, None)
        return gen, rec

    def d_loss(self) -> float:
        batch = self.stream.next()
        self.disc.zero_grad()
        loss = self._d_objective(batch)
        self._d_pending = (batch, loss)
        self.last["disc"] = loss.item()
        return self.last["disc"]

    def d_update(self) -> None:
        batch, loss = self._d_pending
        self.disc.zero_grad()
        loss.backward()
        self.disc.step()
        self._d_pending = None
        self._d_version += 1

    def g_loss(self) -> float:
        batch = self.stream.next_from(self.input_domain)
        gen, rec = self._g_objective(batch.images)
        self._g_pending = (batch, gen, rec, self._d_version)
        self.last["gen"] = gen.item()
        self.last["rec"] = None if rec is None else rec.item()
        return self.last["gen"]

    def g_update(self) -> None:
        batch, gen, rec, version = self._g_pending
        if version != self._d_version:
            # the discriminator moved since the probe; redo the forward pass on the same batch
            gen, rec = self._g_objective(batch.images)
        total = gen if rec is None else gen + self.rec_weight * rec
        self.gen.zero_grad()
        total.backward()
        self.gen.step()
        self.disc.zero_grad()
        if self.reverse is not None:
            self.reverse.zero_grad()
        self._g_pending = None


def run_phase2(
    source: DatasetManifest,
    target: DatasetManifest,
    policy: SchedulingPolicy = SchedulingPolicy(),
    objective: str = L.FLIPPED,
    strategy: BatchStrategy = BatchStrategy(),
    iterations: int = 200,
    seed: int = 0,
    optimizer: OptimizerConfig = OptimizerConfig(),
    rec_weight: float = 1.0,
    activation: Optional[str] = None,
    log_every: int = 1,
    state: Optional[TrainState] = None,
    config_digest: str = "",
    metrics: Optional[MetricsLog] = None,
    diag_path: Optional[Path] = None,
) -> tuple[TrainState, MetricsLog]:
    """Adversarial pretraining of both translation pairs.

    ``rec_weight`` 0 trains pure GANs; any positive weight adds the cycle
    term to each generator step.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("phase 2 needs non-empty source and target manifests")
    if objective not in L.GENERATOR_OBJECTIVES:
        raise ValueError(f"unknown generator objective {objective!r}")
    metrics = metrics if metrics is not None else MetricsLog()
    shape = TensorShape(1, *source.image_shape())
    if state is None:
        nets = {
            role: new_net(role, seed + k, shape, activation)
            for k, role in enumerate((GENERATOR_S2T, GENERATOR_T2S, DISCRIMINATOR_S2T, DISCRIMINATOR_T2S), start=1)
        }
        state = TrainState(nets, optimizer, "phase2", 0, seed, config_digest, {})
    state.phase = "phase2"
    for net in state.nets.values():
        net.attach_optimizer(state.optimizer)
    streams = {
        d: make_batches([source, target], strategy, seed * 1000 + k) for k, d in enumerate(("s2t", "t2s"))
    }
    for d, s in streams.items():
        s.fast_forward(state.counters.get(f"stream_{d}", {}))
    pairs = {
        "s2t": AdversarialPair("s2t", state[GENERATOR_S2T], state[DISCRIMINATOR_S2T], streams["s2t"], objective,
                               state[GENERATOR_T2S] if rec_weight > 0 else None, rec_weight),
        "t2s": AdversarialPair("t2s", state[GENERATOR_T2S], state[DISCRIMINATOR_T2S], streams["t2s"], objective,
                               state[GENERATOR_S2T] if rec_weight > 0 else None, rec_weight),
    }
    totals = state.counters.setdefault("updates", {"d_s2t": 0, "g_s2t": 0, "d_t2s": 0, "g_t2s": 0,
                                                   "g_loop_s2t": 0, "g_loop_t2s": 0})
    for it in range(state.iteration, iterations):
        traces = {}
        for d, pair in pairs.items():
            if policy.kind == SPARSE:
                traces[d] = sparse_iteration(pair, policy.threshold, policy.max_inner_steps)
            else:
                traces[d] = balanced_iteration(pair)
            totals[f"d_{d}"] += traces[d].d_updates
            totals[f"g_{d}"] += traces[d].g_updates
            totals[f"g_loop_{d}"] += traces[d].g_loop_steps
        state.iteration = it + 1
        for d, s in streams.items():
            state.counters[f"stream_{d}"] = s.state()
        recs = [p.last["rec"] for p in pairs.values() if p.last["rec"] is not None]
        report = L.LossReport(
            l_disc_s2t=pairs["s2t"].last["disc"], l_gen_s2t=pairs["s2t"].last["gen"],
            l_disc_t2s=pairs["t2s"].last["disc"], l_gen_t2s=pairs["t2s"].last["gen"],
            l_rec=sum(recs) if recs else None,
        )
        _check_finite(dict(report.items()), state, diag_path)
        if it % log_every == 0 or it == iterations - 1:
            metrics.add_report(it, "phase2", report)
            for d, tr in traces.items():
                metrics.add(it, "phase2", f"g_loop_steps_{d}", tr.g_loop_steps)
                metrics.add(it, "phase2", f"d_updates_{d}", tr.d_updates)
    return state, metrics


# --------------------------------------------------------------------------
# phase 3


REQUIRED_PHASE3 = {
    SEPARATE_DISCRIMINATORS: (REGRESSOR, GENERATOR_S2T, GENERATOR_T2S, DISCRIMINATOR_S2T, DISCRIMINATOR_T2S),
    SHARED_DISCRIMINATOR: (REGRESSOR, GENERATOR_S2T, GENERATOR_T2S),
}


def prepare_phase3_state(pretrained: TrainState, config: Phase3Config, seed: int, config_digest: str = "") -> TrainState:
    """Select (and for shared mode, build) the networks phase 3 trains.

    Shared mode seeds the general discriminator from ``discriminator_shared``
    if present, else from the pretrained source-to-target discriminator.
    """
    for role in REQUIRED_PHASE3[config.discriminator_mode]:
        if role not in pretrained.nets:
            raise ValueError(f"phase 3 needs a pretrained {role} network")
    roles = REQUIRED_PHASE3[config.discriminator_mode]
    nets = {r: Net(pretrained[r].spec, pretrained[r].params.clone()) for r in roles}
    if config.discriminator_mode == SHARED_DISCRIMINATOR:
        base = pretrained.nets.get(DISCRIMINATOR_SHARED) or pretrained.nets.get(DISCRIMINATOR_S2T)
        if base is None:
            raise ValueError(f"phase 3 shared mode needs a pretrained {DISCRIMINATOR_SHARED} or {DISCRIMINATOR_S2T}")
        spec = NetworkSpec(DISCRIMINATOR_SHARED, base.spec.layers, base.spec.input_shape)
        nets[DISCRIMINATOR_SHARED] = Net(spec, base.params.clone())
    state = TrainState(nets, config.optimizer, "phase3", 0, seed, config_digest, {})
    return state


class Phase3Trainer:
    """Cycles minibatch kinds and applies per-network optimizer steps."""

    def __init__(self, state: TrainState, config: Phase3Config, source: DatasetManifest,
                 target: DatasetManifest, seed: int):
        self.state, self.config = state, config
        self.stream = make_batches([source, target], BatchStrategy(SEPARATE, config.batch_size), seed)
        self.stream.fast_forward(state.counters.get("stream", {}))
        shared = config.discriminator_mode == SHARED_DISCRIMINATOR
        self.d_s2t = state[DISCRIMINATOR_SHARED] if shared else state[DISCRIMINATOR_S2T]
        self.d_t2s = state[DISCRIMINATOR_SHARED] if shared else state[DISCRIMINATOR_T2S]
        self.g_s2t, self.g_t2s, self.reg = state[GENERATOR_S2T], state[GENERATOR_T2S], state[REGRESSOR]
        for net in state.nets.values():
            net.attach_optimizer(state.optimizer)
        self.cycle_values: dict[str, list[float]] = {}

    def _zero(self):
        for net in self.state.nets.values():
            net.zero_grad()

    def _note(self, name, value):
        self.cycle_values.setdefault(name, []).append(value)

    def _disc_step(self, disc: Net, real: Optional[torch.Tensor], fake: Optional[torch.Tensor], real_domain: str,
                   name: str) -> None:
        self._zero()
        loss = L.discriminator_loss(
            disc(real) if real is not None else None,
            disc(fake) if fake is not None else None,
            real_domain,
        )
        loss.backward()
        disc.step()
        self._note(name, loss.item())

    def step(self, kind: str) -> None:
        w = self.config.weights
        obj = self.config.generator_objective
        if kind == KIND_SOURCE:
            b = self.stream.next_from(SOURCE)
            self._disc_step(self.d_t2s, b.images, None, SOURCE, "l_disc_t2s")
            self._zero()
            # the regressor is deployed on target images, so its running batch-norm
            # statistics follow only the synthesized-target batches of kind 4
            loss = L.steering_mse(self.reg(b.images, track_stats=False), b.labels)
            loss.backward()
            self.reg.step()
            self._note("l_steering", loss.item())
        elif kind == KIND_TARGET:
            b = self.stream.next_from(TARGET)
            self._disc_step(self.d_s2t, b.images, None, TARGET, "l_disc_s2t")
        elif kind == KIND_SYNTH_SOURCE:
            b = self.stream.next_from(TARGET)
            fake = self.g_t2s(b.images)
            self._disc_step(self.d_t2s, None, fake.detach(), SOURCE, "l_disc_t2s")
            self._zero()
            gen = L.generator_loss(self.d_t2s(fake, track_stats=False), obj, SOURCE)
            rec = L.reconstruction_loss(None, None, b.images, self.g_s2t(fake, track_stats=False))
            if w.gan_t2s > 0 or w.rec > 0:
                (w.gan_t2s * gen + w.rec * rec).backward()
                self.g_t2s.step()
                if w.rec > 0:
                    self.g_s2t.step()
            self._note("l_gen_t2s", gen.item())
            self._note("l_rec_t", rec.item())
        elif kind == KIND_SYNTH_TARGET:
            b = self.stream.next_from(SOURCE)
            fake = self.g_s2t(b.images)
            self._disc_step(self.d_s2t, None, fake.detach(), TARGET, "l_disc_s2t")
            self._zero()
            gen = L.generator_loss(self.d_s2t(fake, track_stats=False), obj, TARGET)
            rec = L.reconstruction_loss(b.images, self.g_t2s(fake, track_stats=False), None, None)
            reg = L.steering_mse(self.reg(fake), b.labels)
            reg_grads = torch.autograd.grad(reg, self.reg.params.trainable(), retain_graph=True)
            (w.gan_s2t * gen + w.rec * rec + w.regression * reg).backward()
            if w.gan_s2t > 0 or w.rec > 0 or w.regression > 0:
                self.g_s2t.step()
            if w.rec > 0:
                self.g_t2s.step()
            for p, g in zip(self.reg.params.trainable(), reg_grads):
                p.grad = g
            self.reg.step()
            self._note("l_gen_s2t", gen.item())
            self._note("l_rec_s", rec.item())
            self._note("l_steering_translated", reg.item())
        else:
            raise ValueError(f"unknown minibatch kind {kind!r}")
        self.state.counters["stream"] = self.stream.state()

    def cycle_report(self) -> L.LossReport:
        v = {k: float(np.mean(x)) for k, x in self.cycle_values.items()}
        report = L.LossReport(
            l_steering=v.get("l_steering"),
            l_disc_s2t=v.get("l_disc_s2t"), l_gen_s2t=v.get("l_gen_s2t"),
            l_disc_t2s=v.get("l_disc_t2s"), l_gen_t2s=v.get("l_gen_t2s"),
        )
        if "l_rec_s" in v and "l_rec_t" in v:
            report.l_rec = v["l_rec_s"] + v["l_rec_t"]
        if "l_steering" in v and "l_steering_translated" in v:
            report.l_regression = v["l_steering"] + v["l_steering_translated"]
        if all(getattr(report, n) is not None for n in L.COMBINED_PARTS):
            report.l_combined = float(L.combined_loss(report, self.config.weights))
        self.cycle_values = {}
        return report


def run_phase3(
    pretrained: TrainState,
    config: Phase3Config,
    source: DatasetManifest,
    target: DatasetManifest,
    seed: int = 0,
    val_manifest: Optional[DatasetManifest] = None,
    state: Optional[TrainState] = None,
    config_digest: str = "",
    metrics: Optional[MetricsLog] = None,
    diag_path: Optional[Path] = None,
    on_kind=None,
) -> tuple[TrainState, MetricsLog]:
    """Joint training of regressor, generators and discriminator(s).

    ``val_manifest`` (labelled, typically held-out target) is scored with the
    regressor every ``config.val_every`` cycles and at the start, logged as
    ``l_val_target_mse``. The best cycle combined objective is tracked in
    ``state.counters["best_combined"]``. ``on_kind(kind, state)`` is called
    after every minibatch (used by tests).
    """
    metrics = metrics if metrics is not None else MetricsLog()
    if state is None:
        state = prepare_phase3_state(pretrained, config, seed, config_digest)
    trainer = Phase3Trainer(state, config, source, target, seed)
    cycle = list(config.minibatch_cycle)
    if val_manifest is not None and state.iteration == 0:
        metrics.add(0, "phase3", "l_val_target_mse", evaluate_mse(trainer.reg, val_manifest))
    for it in range(state.iteration, config.iterations):
        kind = cycle[it % len(cycle)]
        trainer.step(kind)
        state.iteration = it + 1
        if on_kind is not None:
            on_kind(kind, state)
        if (it + 1) % len(cycle) == 0:
            n_cycle = (it + 1) // len(cycle)
            report = trainer.cycle_report()
            _check_finite(dict(report.items()), state, diag_path)
            metrics.add_report(it + 1, "phase3", report)
            if report.l_combined is not None:
                best = state.counters.get("best_combined")
                if best is None or report.l_combined < best:
                    state.counters["best_combined"] = report.l_combined
            if val_manifest is not None and n_cycle % config.val_every == 0:
                metrics.add(it + 1, "phase3", "l_val_target_mse", evaluate_mse(trainer.reg, val_manifest))
    return state, metrics


def non_increasing_fraction(values: Iterable[float]) -> float:
    """Share of logged points (after the first) not above their predecessor."""
    v = list(values)
    if len(v) < 2:
        return 1.0
    return sum(b <= a for a, b in zip(v, v[1:])) / (len(v) - 1)
