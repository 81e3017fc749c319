"""Command-line entry point.

Every subcommand reads an optional TOML config (sections ``run``, ``data``,
``synth``, ``optimizer``, ``phase1``, ``phase2``, ``phase3``, ``eval``),
applies ``--set section.key=value`` overrides and the shortcut flags, and
writes its artifacts into a fresh timestamped directory under the output
root (``--out``, ``run.out_root`` or ``$STEERADAPT_OUT``, default ``runs``).

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from . import SOURCE, TARGET, __version__

logger = logging.getLogger("steeradapt")

OUT_ENV = "STEERADAPT_OUT"
SUBCOMMANDS = ("synth-data", "phase1", "phase2", "phase3", "eval", "translate", "gradcheck")

DEFAULTS: dict = {
    "run": {"seed": 0, "out_root": ""},
    "data": {
        "dir": "",
        "source": "source.csv",
        "target": "target.csv",
        "target_test": "target_test.csv",
        "stats": "stats.txt",
        "height": 80,
        "width": 160,
        "val_fraction": 0.1,
        "test_val_fraction": 0.5,
    },
    "synth": {"n_per_domain": 512, "n_test": 128, "seed": 0, "angle_min": -0.5, "angle_max": 0.5},
    "optimizer": {"learning_rate": 1e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "phase1": {"iterations": 5000, "batch_size": 32, "log_every": 50, "activation": "relu"},
    "phase2": {
        "iterations": 200,
        "batch_size": 32,
        "policy": "sparse",
        "threshold": 0.8,
        "max_inner_steps": 20,
        "objective": "flipped",
        "strategy": "separate",
        "rec_weight": 1.0,
        "activation": "leaky_relu",
        "log_every": 1,
    },
    "phase3": {
        "iterations": 400,
        "batch_size": 32,
        "discriminator_mode": "separate",
        "objective": "flipped",
        "gan_s2t": 1.0,
        "gan_t2s": 1.0,
        "rec": 1.0,
        "regression": 1.0,
        "val_every": 10,
    },
    "eval": {"path": "direct", "epsilon": 0.01, "translate_count": 8},
}

# keys that decide where things go rather than what is computed
_LOCATION_KEYS = {("run", "out_root")}


class UsageError(Exception):
    """Bad flags or config content (exit 1)."""


class RuntimeFailure(Exception):
    """Missing artifacts or failures while running (exit 2)."""


# --------------------------------------------------------------------------
# config


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError:
        raise UsageError(f"expected a {type(like).__name__}, got {value!r}") from None
    return value


def merge_config(base: dict, overlay: dict, origin: str) -> dict:
    out = copy.deepcopy(base)
    for section, values in overlay.items():
        if section not in out:
            raise UsageError(f"{origin}: unknown config section [{section}]")
        if not isinstance(values, dict):
            raise UsageError(f"{origin}: [{section}] must be a table")
        for key, value in values.items():
            if key not in out[section]:
                raise UsageError(f"{origin}: unknown key {section}.{key}")
            like = out[section][key]
            if isinstance(like, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if type(value) is not type(like):
                raise UsageError(f"{origin}: {section}.{key} should be {type(like).__name__}, got {value!r}")
            out[section][key] = value
    return out


def load_config(path: Optional[str], overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise RuntimeFailure(f"config file not found: {p}")
        try:
            cfg = merge_config(cfg, tomllib.loads(p.read_text(encoding="utf-8")), str(p))
        except tomllib.TOMLDecodeError as e:
            raise UsageError(f"{p}: {e}") from None
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            raise UsageError(f"--set: unknown key {dotted}")
        cfg[section][key] = _coerce(raw, cfg[section][key])
    return cfg


def config_digest(cfg: dict) -> str:
    content = {s: {k: v for k, v in vals.items() if (s, k) not in _LOCATION_KEYS} for s, vals in cfg.items()}
    return hashlib.sha256(json.dumps(content, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# --------------------------------------------------------------------------
# run directory and inputs


def make_run_dir(cfg: dict, command: str, explicit: Optional[str]) -> Path:
    root = Path(explicit or cfg["run"]["out_root"] or os.environ.get(OUT_ENV) or "runs")
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{command}-{stamp}"
    run_dir, n = base, 1
    while True:
        try:
            run_dir.mkdir(parents=True, exist_ok=False)
            return run_dir
        except FileExistsError:
            n += 1
            run_dir = Path(f"{base}-{n}")


def _data_path(cfg: dict, key: str) -> Path:
    p = Path(cfg["data"][key])
    if not p.is_absolute() and cfg["data"]["dir"]:
        p = Path(cfg["data"]["dir"]) / p
    return p


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise RuntimeFailure(f"{what} not found: {path}")
    return path


def load_inputs(cfg: dict, need_target: bool = True, need_test: bool = False):
    from .data import load_manifest, load_stats

    stats = load_stats(_require(_data_path(cfg, "stats"), "stats file"))
    h, w = cfg["data"]["height"], cfg["data"]["width"]
    out = {SOURCE: load_manifest(_require(_data_path(cfg, "source"), "source manifest"), SOURCE, stats, h, w)}
    if need_target:
        out[TARGET] = load_manifest(_require(_data_path(cfg, "target"), "target manifest"), TARGET, stats, h, w)
    if need_test:
        out["target_test"] = load_manifest(
            _require(_data_path(cfg, "target_test"), "target test manifest"), TARGET, stats, h, w)
    return out


def _optimizer(cfg):
    from .training import OptimizerConfig

    o = cfg["optimizer"]
    return OptimizerConfig(o["learning_rate"], o["beta1"], o["beta2"], o["eps"])


def _load_ckpt(path: Optional[str], what: str):
    from .checkpoint import CheckpointError
    from .training import load_checkpoint

    if not path:
        raise UsageError(f"--{what} is required")
    try:
        return load_checkpoint(_require(Path(path), f"{what} checkpoint"))
    except CheckpointError as e:
        raise RuntimeFailure(f"{path}: {e}") from None


def _val_test_split(manifest, cfg):
    return manifest.split(1.0 - cfg["data"]["test_val_fraction"], cfg["run"]["seed"])


def _finish(run_dir: Path, metrics) -> None:
    from .evaluation import plot_loss_curves

    if metrics.rows:
        plot_loss_curves(metrics, run_dir / "plots")


# --------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args, cfg, run_dir: Path) -> int:
    from .data import SynthConfig, generate_synthetic, write_synthetic

    s = cfg["synth"]
    sc = SynthConfig(n_per_domain=s["n_per_domain"], n_test=s["n_test"], angle_range=(s["angle_min"], s["angle_max"]),
                     seed=s["seed"], height=cfg["data"]["height"], width=cfg["data"]["width"])
    out = write_synthetic(generate_synthetic(sc), run_dir / "data")
    print(f"synthetic dataset written to {out}")
    return 0


def cmd_phase1(args, cfg, run_dir: Path) -> int:
    from .training import MetricsLog, load_checkpoint, run_phase1, save_checkpoint

    data = load_inputs(cfg, need_target=False)
    p = cfg["phase1"]
    digest = config_digest(cfg)
    state = None
    if args.resume:
        from .checkpoint import CheckpointError
        try:
            state = load_checkpoint(_require(Path(args.resume), "resume checkpoint"), expect_digest=digest)
        except CheckpointError as e:
            raise RuntimeFailure(f"{args.resume}: {e}") from None
    metrics = MetricsLog(run_dir / "metrics.csv")
    state, metrics = run_phase1(
        data[SOURCE], _optimizer(cfg), p["iterations"], p["batch_size"], cfg["run"]["seed"], p["log_every"],
        cfg["data"]["val_fraction"], state, p["activation"], digest, metrics, run_dir / "diverged.ckpt")
    save_checkpoint(state, run_dir / "phase1.ckpt")
    _finish(run_dir, metrics)
    _, last = metrics.series("l_steering")
    print(f"phase1 done: {state.iteration} iterations, last train MSE {last[-1]:.5f}" if last else "phase1 done")
    return 0


def cmd_phase2(args, cfg, run_dir: Path) -> int:
    from .data import BatchStrategy
    from .training import MetricsLog, SchedulingPolicy, load_checkpoint, run_phase2, save_checkpoint

    data = load_inputs(cfg)
    p = cfg["phase2"]
    digest = config_digest(cfg)
    state = None
    if args.resume:
        state = load_checkpoint(_require(Path(args.resume), "resume checkpoint"), expect_digest=digest)
    metrics = MetricsLog(run_dir / "metrics.csv")
    state, metrics = run_phase2(
        data[SOURCE], data[TARGET], SchedulingPolicy(p["policy"], p["threshold"], p["max_inner_steps"]),
        p["objective"], BatchStrategy(p["strategy"], p["batch_size"]), p["iterations"], cfg["run"]["seed"],
        _optimizer(cfg), p["rec_weight"], p["activation"], p["log_every"], state, digest, metrics,
        run_dir / "diverged.ckpt")
    save_checkpoint(state, run_dir / "phase2.ckpt")
    _finish(run_dir, metrics)
    print(f"phase2 done: {state.iteration} iterations, updates {state.counters['updates']}")
    return 0


def _phase3_config(cfg):
    from .losses import LossWeights
    from .training import Phase3Config

    p = cfg["phase3"]
    return Phase3Config(
        discriminator_mode=p["discriminator_mode"],
        weights=LossWeights(p["gan_s2t"], p["gan_t2s"], p["rec"], p["regression"]),
        iterations=p["iterations"], batch_size=p["batch_size"], generator_objective=p["objective"],
        val_every=p["val_every"], optimizer=_optimizer(cfg))


def cmd_phase3(args, cfg, run_dir: Path) -> int:
    from .training import MetricsLog, load_checkpoint, merge_states, run_phase3, save_checkpoint

    data = load_inputs(cfg, need_test=True)
    p1 = _load_ckpt(args.phase1, "phase1")
    p2 = _load_ckpt(args.phase2, "phase2")
    digest = config_digest(cfg)
    state = None
    if args.resume:
        state = load_checkpoint(_require(Path(args.resume), "resume checkpoint"), expect_digest=digest)
    val, _ = _val_test_split(data["target_test"], cfg)
    metrics = MetricsLog(run_dir / "metrics.csv")
    state, metrics = run_phase3(
        merge_states(p1, p2), _phase3_config(cfg), data[SOURCE], data[TARGET], cfg["run"]["seed"], val, state,
        digest, metrics, run_dir / "diverged.ckpt")
    save_checkpoint(state, run_dir / "phase3.ckpt")
    _finish(run_dir, metrics)
    _, v = metrics.series("l_val_target_mse")
    print(f"phase3 done: {state.iteration} minibatches" + (f", target val MSE {v[0]:.5f} -> {v[-1]:.5f}" if v else ""))
    return 0


def cmd_eval(args, cfg, run_dir: Path) -> int:
    from .evaluation import DIRECT, evaluate, write_report, append_summary
    from .nn_core import GENERATOR_T2S, REGRESSOR
    from .training import MetricsLog

    data = load_inputs(cfg, need_target=False, need_test=True)
    adapted = _load_ckpt(args.checkpoint, "checkpoint")
    path, eps = cfg["eval"]["path"], cfg["eval"]["epsilon"]
    gen = adapted.nets.get(GENERATOR_T2S)
    if path != DIRECT and gen is None:
        raise RuntimeFailure(f"{args.checkpoint} has no {GENERATOR_T2S} network for path {path}")
    val, test = _val_test_split(data["target_test"], cfg)
    metrics = MetricsLog(run_dir / "metrics.csv")
    a_val = evaluate(adapted[REGRESSOR], val, path, gen, eps, "target_val")
    a_test = evaluate(adapted[REGRESSOR], test, path, gen, eps, "target_test")
    append_summary(metrics, adapted.iteration, "eval", "adapted_val", a_val)
    append_summary(metrics, adapted.iteration, "eval", "adapted_test", a_test)
    print(f"adapted: val MSE {a_val.mse:.5f} AARE {a_val.aare:.2f}%, test MSE {a_test.mse:.5f} AARE {a_test.aare:.2f}%")
    if args.baseline:
        base = _load_ckpt(args.baseline, "baseline")
        b_val = evaluate(base[REGRESSOR], val, DIRECT, None, eps, "target_val")
        b_test = evaluate(base[REGRESSOR], test, DIRECT, None, eps, "target_test")
        append_summary(metrics, base.iteration, "eval", "baseline_val", b_val)
        append_summary(metrics, base.iteration, "eval", "baseline_test", b_test)
        report = write_report(run_dir / "report.txt", a_val, a_test, b_val, b_test)
        sys.stdout.write(report.read_text())
    return 0


def cmd_translate(args, cfg, run_dir: Path) -> int:
    import torch
    from PIL import Image

    from .nn_core import GENERATOR_S2T, GENERATOR_T2S

    data = load_inputs(cfg)
    state = _load_ckpt(args.checkpoint, "checkpoint")
    n = cfg["eval"]["translate_count"]
    out = run_dir / "translated"
    out.mkdir()
    for role, src, dst in ((GENERATOR_S2T, SOURCE, TARGET), (GENERATOR_T2S, TARGET, SOURCE)):
        if role not in state.nets:
            continue
        m = data[src]
        recs = m.records[:n]
        x = torch.from_numpy(np.stack([r.image for r in recs]))
        with torch.no_grad():
            y = state[role].eval(x).double().numpy()
        for rec, before, after in zip(recs, x.double().numpy(), y):
            pair = [m.stats.denormalize(before, src), m.stats.denormalize(after, dst)]
            strip = np.concatenate([np.clip(np.rint(p), 0, 255).astype(np.uint8).transpose(1, 2, 0) for p in pair], 1)
            Image.fromarray(strip).save(out / f"{role}_{Path(rec.id).stem}.png")
    print(f"translations written to {out}")
    return 0


def cmd_gradcheck(args, cfg, run_dir: Path) -> int:
    from .gradcheck import LOSS_SELECTORS, gradient_check

    losses = [args.loss] if args.loss else list(LOSS_SELECTORS)
    worst, ok = 0.0, True
    lines = []
    for loss in losses:
        rep = gradient_check(loss, tolerance=args.tolerance, max_elements=args.max_elements, raise_on_fail=False)
        worst = max(worst, rep.max_error)
        ok &= rep.passed
        name, err = rep.worst(1)[0] if rep.errors else ("-", 0.0)
        lines.append(f"{loss:<22} max rel err {rep.max_error:.3e} ({name}) {'PASS' if rep.passed else 'FAIL'}")
    lines.append(f"worst relative error {worst:.3e} at tolerance {args.tolerance:g}: {'PASS' if ok else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    (run_dir / "gradcheck.txt").write_text(text)
    sys.stdout.write(text)
    return 0 if ok else 2


COMMANDS = {
    "synth-data": cmd_synth_data,
    "phase1": cmd_phase1,
    "phase2": cmd_phase2,
    "phase3": cmd_phase3,
    "eval": cmd_eval,
    "translate": cmd_translate,
    "gradcheck": cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="steeradapt", description="Adversarial domain adaptation for steering regression.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
        p.add_argument("--out", help="output root (else run.out_root, $%s, ./runs)" % OUT_ENV)
        p.add_argument("--seed", type=int, help="same as --set run.seed=N")
        p.add_argument("--data-dir", help="same as --set data.dir=PATH")
        p.add_argument("--iterations", type=int, help="same as --set <phase>.iterations=N")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("phase1", "phase2", "phase3"):
            p.add_argument("--resume", help="checkpoint of an interrupted run with the same config")
        if name == "phase3":
            p.add_argument("--phase1", help="phase 1 checkpoint (regressor)")
            p.add_argument("--phase2", help="phase 2 checkpoint (generators, discriminators)")
        if name in ("eval", "translate"):
            p.add_argument("--checkpoint", help="trained checkpoint to use")
        if name == "eval":
            p.add_argument("--baseline", help="source-only phase 1 checkpoint to compare against")
        if name == "gradcheck":
            p.add_argument("--loss", help="check one loss only")
            p.add_argument("--tolerance", type=float, default=1e-4)
            p.add_argument("--max-elements", type=int, default=40, help="probed elements per parameter entry")
    return parser


def _apply_shortcuts(args, cfg) -> dict:
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.data_dir is not None:
        cfg["data"]["dir"] = args.data_dir
    if args.iterations is not None:
        if args.command not in ("phase1", "phase2", "phase3"):
            raise UsageError("--iterations applies to phase1, phase2 and phase3 only")
        cfg[args.command]["iterations"] = args.iterations
    return cfg


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = _apply_shortcuts(args, load_config(args.config, args.set))
        run_dir = make_run_dir(cfg, args.command, args.out)
        (run_dir / "config.toml").write_text(tomli_w.dumps(cfg), encoding="utf-8")
        (run_dir / "config.digest").write_text(config_digest(cfg) + "\n")
        print(f"run directory: {run_dir}")
        return COMMANDS[args.command](args, cfg, run_dir)
    except UsageError as e:
        print(f"steeradapt: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except (RuntimeFailure, FileNotFoundError, ValueError, FloatingPointError) as e:
        print(f"steeradapt: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
