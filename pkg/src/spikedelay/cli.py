"""Command-line entry point.

Subcommands: train, gradcheck, ablate, synth, export-kernels, demo-fig1.
Exit codes: 0 success, 1 bad config/arguments, 2 unreadable or malformed
data, 3 numeric failure during training, 4 gradient check failure.

Thread-count pinning (SPIKEDELAY_THREADS) must happen before numpy loads,
so heavyweight imports live inside the handlers, not at module top.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_GRADCHECK = 4


class ConfigError(ValueError):
    pass


def _apply_thread_env() -> None:
    threads = os.environ.get("SPIKEDELAY_THREADS")
    if not threads:
        return
    if not threads.isdigit() or int(threads) < 1:
        raise ConfigError(f"SPIKEDELAY_THREADS must be a positive integer, got {threads!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, threads)


def _filtered_dataclass(cls, section: dict, where: str):
    import dataclasses
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {where}: {exc}") from exc


def load_run_config(path: str):
    """Parse the JSON run file into (ModelConfig, TrainConfig, data section,
    suite section or None).  Unknown keys anywhere are rejected."""
    from .network import ModelConfig
    from .training import TrainConfig

    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = {"model", "train", "data", "ablation", "suite"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    for key in ("model", "train", "data"):
        if key not in raw:
            raise ConfigError(f"config is missing the {key!r} section")
    model_cfg = _filtered_dataclass(ModelConfig, raw["model"], "model section")
    train_section = dict(raw["train"])
    if "ablation" in raw and isinstance(raw["ablation"], str):
        train_section["ablation"] = raw["ablation"]
    train_cfg = _filtered_dataclass(TrainConfig, train_section, "train section")
    suite = raw.get("suite")
    if suite is None and isinstance(raw.get("ablation"), dict):
        suite = raw["ablation"]
    if suite is not None:
        bad = set(suite) - {"modes", "seeds"}
        if bad:
            raise ConfigError(f"unknown keys in suite section: {sorted(bad)}")
    return model_cfg, train_cfg, raw["data"], suite


def load_data_section(section: dict):
    """Resolve the data section to (train, val, test) SpikeDatasets."""
    from .core_math import SeededRng
    from .datasets import (DataFormatError, PlantedDelaySpec,
                           generate_planted_delay, load_spkds, split)

    if not isinstance(section, dict) or "kind" not in section:
        raise ConfigError("data section needs a 'kind' of planted or spkds")
    kind = section["kind"]
    if kind == "planted":
        bad = set(section) - {"kind", "spec", "seed", "split"}
        if bad:
            raise ConfigError(f"unknown keys in data section: {sorted(bad)}")
        spec = _filtered_dataclass(PlantedDelaySpec, section.get("spec", {}), "planted spec")
        seed = int(section.get("seed", 0))
        fracs = section.get("split", [0.6, 0.2, 0.2])
        ds = generate_planted_delay(spec, SeededRng(seed, 0))
        try:
            return split(ds, fracs, SeededRng(seed, 9))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if kind == "spkds":
        bad = set(section) - {"kind", "train", "val", "test"}
        if bad:
            raise ConfigError(f"unknown keys in data section: {sorted(bad)}")
        out = []
        for name in ("train", "val", "test"):
            if name not in section:
                raise ConfigError(f"spkds data section needs a {name!r} path")
            try:
                out.append(load_spkds(section[name]))
            except (OSError, DataFormatError) as exc:
                raise DataFormatError(f"cannot load {name} dataset {section[name]}: {exc}") from exc
        return tuple(out)
    raise ConfigError(f"unknown data kind {kind!r}")


def cmd_train(args) -> int:
    from .core_math import NumericsError
    from .datasets import DataFormatError
    from .training import Trainer, evaluate

    try:
        model_cfg, train_cfg, data_section, _ = load_run_config(args.config)
        if args.epochs is not None:
            train_cfg.epochs = args.epochs
        if args.seed is not None:
            train_cfg.seed = args.seed
        if args.mode is not None:
            train_cfg.ablation = args.mode
        train_cfg.__post_init__()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        train_ds, val_ds, test_ds = load_data_section(data_section)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(model_cfg, train_cfg, train_ds, val_ds,
                      checkpoint_path=out_dir / "best.ckpt",
                      log_path=out_dir / "train_log.jsonl")
    try:
        summary = trainer.train()
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    trainer.restore_best()
    test = evaluate(trainer.model, test_ds)
    print(f"mode={train_cfg.ablation} seed={train_cfg.seed} epochs={train_cfg.epochs}")
    if summary["best_val_acc"] is not None:
        print(f"best val accuracy: {summary['best_val_acc']:.4f}")
    print(f"test accuracy (discretized): {test['accuracy']:.4f}")
    print(f"artifacts: {out_dir / 'best.ckpt'}, {out_dir / 'train_log.jsonl'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .training import grad_check

    report = grad_check(seed=args.seed)
    for group, err in sorted(report.per_group.items()):
        print(f"group {group}: max rel err {err:.3e}")
    print(f"model: {report.model_desc}")
    print(f"worst: {report.worst}")
    print(f"result: {'PASS' if report.passed else 'FAIL'} (max {report.max_rel_err:.3e}, tol 1e-04)")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_ablate(args) -> int:
    from .core_math import NumericsError
    from .datasets import DataFormatError
    from .training import run_ablation_suite

    try:
        model_cfg, train_cfg, data_section, suite = load_run_config(args.config)
        if suite is None:
            raise ConfigError("ablate needs a 'suite' section with modes and seeds")
        modes = suite.get("modes")
        seeds = suite.get("seeds")
        if not modes or not seeds:
            raise ConfigError("suite section needs non-empty 'modes' and 'seeds'")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        train_ds, val_ds, test_ds = load_data_section(data_section)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA

    def progress(mode, seed, acc):
        print(f"  {mode} seed={seed}: test acc {acc:.4f}", flush=True)

    try:
        rows = run_ablation_suite(model_cfg, train_cfg, modes, [int(s) for s in seeds],
                                  train_ds, val_ds, test_ds, progress=progress)
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{'mode':34s} {'params':>8s} {'mean acc':>9s} {'ci95':>7s}")
    for row in rows:
        print(f"{row['mode']:34s} {row['n_params']:8d} {row['mean']:9.4f} "
              f"{row['ci95']:7.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .core_math import SeededRng
    from .datasets import PlantedDelaySpec, generate_planted_delay, save_spkds

    try:
        section = json.loads(Path(args.spec).read_text()) if args.spec else {}
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read spec: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = section.pop("seed", args.seed or 0)
    try:
        spec = _filtered_dataclass(PlantedDelaySpec, section, "planted spec")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ds = generate_planted_delay(spec, SeededRng(int(seed), 0))
    save_spkds(args.out, ds)
    print(f"wrote {args.out}: {len(ds)} samples, {ds.num_channels} channels, "
          f"{ds.num_classes} classes")
    return EXIT_OK


def cmd_export_kernels(args) -> int:
    from . import delay_layers as dl
    from .network import DenseConvConnection, load_checkpoint

    try:
        model, _ = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_DATA
    discretized = []
    for conn in model.connections:
        if isinstance(conn, DenseConvConnection):
            kern = conn.effective_kernels()
            c_out, c_in, T_d = kern.shape
            taps = [(i, j, n, float(kern[i, j, n]))
                    for i in range(c_out) for j in range(c_in) for n in range(T_d)
                    if kern[i, j, n] != 0.0]
            discretized.append(dl.DiscreteKernels(c_out, c_in, T_d, taps))
        else:
            discretized.append(dl.discretize(conn))
    doc = dl.export_taps_doc(discretized)
    Path(args.out).write_text(json.dumps(doc) + "\n")
    n_taps = sum(len(layer["taps"]) for layer in doc["layers"])
    print(f"wrote {args.out}: {len(doc['layers'])} layers, {n_taps} taps")
    return EXIT_OK


def cmd_demo_fig1(args) -> int:
    """Coincidence detection with two presynaptic spike trains (spikes at
    t=8 and t=0) feeding one neuron through w=0.6 synapses.  N1 has zero
    delays: the spikes arrive 8 steps apart and the membrane peaks at 0.6,
    below threshold.  N2 delays the early train by 8 steps so both arrive
    together and it fires."""
    import numpy as np

    from . import delay_layers as dl
    from .core_math import conv1d_causal_forward
    from .neurons import LIFConfig, lif_forward

    T, T_d = 12, 10
    x = np.zeros((1, 2, T), np.float32)
    x[0, 0, 8] = 1.0
    x[0, 1, 0] = 1.0
    cfg = LIFConfig(tau_steps=2.0, v_threshold=1.0)   # tau = 2 ms at 1 ms steps
    w = np.full((1, 2, 1), 0.6, np.float32)

    def run(delay_steps: float):
        layer = dl.DelayedSynapseLayer(
            w=w.copy(), d=np.array([[[0.0], [delay_steps]]], np.float32),
            sigma=0.5, kernel_size=T_d)
        kern = dl.discretize(layer).to_dense(np.float32)
        trace = lif_forward(conv1d_causal_forward(x, kern), cfg)
        return trace.u[0, 0], trace.spikes[0, 0]

    u1, s1 = run(0.0)
    u2, s2 = run(8.0)
    for name, u, s in (("N1 (no delay)", u1, s1), ("N2 (delay 8)", u2, s2)):
        print(f"{name} membrane: " + " ".join(f"{v:.3f}" for v in u))
        print(f"{name} spikes:   " + " ".join("|" if v else "." for v in s))
    spike_times = np.nonzero(s2)[0]
    print(f"N2 spiked at t={int(spike_times[0])}; N1 max u={float(u1.max()):.1f} < 1"
          if len(spike_times) else "N2 never spiked")
    ok = (s1.sum() == 0 and float(u1.max()) < cfg.v_threshold
          and len(spike_times) == 1 and int(spike_times[0]) == 8)
    print("coincidence detection:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikedelay",
        description="Train and evaluate spiking networks with learnable synaptic delays.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one model from a JSON run config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out-dir", default="runs/latest")
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--mode", default=None)
    p_train.set_defaults(func=cmd_train)

    p_grad = sub.add_parser("gradcheck", help="compare analytic gradients to finite differences")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_abl = sub.add_parser("ablate", help="run the ablation suite from a JSON run config")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--out", default=None)
    p_abl.set_defaults(func=cmd_ablate)

    p_synth = sub.add_parser("synth", help="generate a planted-delay SPKDS file")
    p_synth.add_argument("--spec", default=None, help="JSON file of generator fields")
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_synth)

    p_exp = sub.add_parser("export-kernels", help="dump discretized taps as JSON")
    p_exp.add_argument("--checkpoint", required=True)
    p_exp.add_argument("--out", required=True)
    p_exp.set_defaults(func=cmd_export_kernels)

    p_demo = sub.add_parser("demo-fig1", help="two-spike coincidence demonstration")
    p_demo.set_defaults(func=cmd_demo_fig1)
    return parser


def main(argv=None) -> int:
    try:
        _apply_thread_env()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
