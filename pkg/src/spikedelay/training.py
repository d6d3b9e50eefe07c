"""Optimization loop: Adam with two parameter groups (synaptic weights and
delays), one-cycle weight lr stepped per batch, cosine-annealed delay lr
stepped per epoch, the per-epoch sigma decay, delay clamping after every
step, finite-difference gradient checking, and the ablation-suite runner
that matches baseline parameter counts to the delayed model.
"""

from __future__ import annotations

import copy
import enum
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import delay_layers as dl
from . import network as nw
from .core_math import NumericsError, SeededRng, check_finite
from .datasets import SpikeDataset, make_batches


class AblationMode(enum.Enum):
    DECREASING_SIGMA = "decreasing_sigma"
    CONSTANT_SIGMA = "constant_sigma"
    FIXED_RANDOM_DELAYS = "fixed_random_delays"
    FIXED_WEIGHTS_DECREASING_SIGMA = "fixed_weights_decreasing_sigma"
    NO_DELAYS_WIDER = "no_delays_wider"
    NO_DELAYS_DEEPER = "no_delays_deeper"
    DENSE_CONV_BASELINE = "dense_conv_baseline"

    @classmethod
    def from_string(cls, name: str) -> "AblationMode":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown ablation mode {name!r}; expected one of: {valid}") from None

    @property
    def trains_delays(self) -> bool:
        return self in (
            AblationMode.DECREASING_SIGMA,
            AblationMode.CONSTANT_SIGMA,
            AblationMode.FIXED_WEIGHTS_DECREASING_SIGMA,
        )

    @property
    def trains_weights(self) -> bool:
        return self is not AblationMode.FIXED_WEIGHTS_DECREASING_SIGMA

    @property
    def sigma_mode(self) -> str:
        return "constant" if self is AblationMode.CONSTANT_SIGMA else "exponential"


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 128
    lr_w: float = 1e-3
    lr_d: float = 0.1
    seed: int = 0
    sigma_min: float = dl.SIGMA_MIN
    # decay horizon in epochs; None follows `epochs`, smaller values reach
    # sigma_min early and hold it for the rest of the run
    sigma_epochs: int | None = None
    ablation: str = "decreasing_sigma"
    eval_every: int = 1

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.sigma_epochs is not None and self.sigma_epochs < 2:
            raise ValueError("sigma_epochs must be None or >= 2")
        AblationMode.from_string(self.ablation)

    @property
    def mode(self) -> AblationMode:
        return AblationMode.from_string(self.ablation)


@dataclass
class AdamState:
    """First/second moment tensors per parameter plus the group step count."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, arr in params.items():
            state.m[name] = np.zeros(arr.shape, np.float64)
            state.v[name] = np.zeros(arr.shape, np.float64)
        return state


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> None:
    """One update over the given name -> tensor dicts, in place.

    Aborts (NumericsError) on non-finite gradients rather than corrupting
    the moments.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient in {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, np.float64)
            state.v[name] = np.zeros(p.shape, np.float64)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


def one_cycle_lr(step: int, total_steps: int, peak_lr: float,
                 pct_start: float = 0.3, div: float = 25.0, final_div: float = 1e4) -> float:
    """Cosine warmup from peak/div to peak over the first pct_start of steps,
    then cosine descent to peak/final_div at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if total_steps == 1:
        return peak_lr
    warm = max(1, int(round(pct_start * (total_steps - 1))))
    if step <= warm:
        pct = step / warm
        start, end = peak_lr / div, peak_lr
    else:
        pct = (step - warm) / (total_steps - 1 - warm)
        start, end = peak_lr, peak_lr / final_div
    return end + (start - end) * (1 + np.cos(np.pi * pct)) / 2


def cosine_anneal_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """lr0 at epoch 0 down to exactly 0 at the last epoch."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if total_epochs == 1:
        return lr0
    return lr0 * (1 + np.cos(np.pi * epoch / (total_epochs - 1))) / 2


# ---------------------------------------------------------------------------
# Equal-parameter baseline sizing.

def _count_params_raw(input_channels: int, hidden_sizes, n_classes: int,
                      delayed: bool, kernel_count: int = 1, fan_in: int | None = None,
                      dense_taps: int | None = None) -> int:
    """Learnable tensor entries: per-synapse (weight, delay) pairs or plain
    weights, plus the two batchnorm vectors per hidden layer."""
    widths = [input_channels] + list(hidden_sizes) + [n_classes]
    total = 0
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        eff_in = min(fan_in, c_in) if fan_in is not None else c_in
        if delayed:
            total += 2 * eff_in * c_out * kernel_count
        elif dense_taps is not None:
            total += eff_in * c_out * dense_taps
        else:
            total += eff_in * c_out
    total += 2 * sum(hidden_sizes)
    return total


def count_params(config: nw.ModelConfig) -> int:
    """Learnable parameter count for the model a config describes."""
    dense_taps = max(config.kernel_size) if config.dense_conv else None
    return _count_params_raw(
        config.input_channels,
        config.hidden_sizes,
        config.n_classes,
        delayed=config.use_delays and not config.dense_conv,
        kernel_count=config.kernel_count,
        fan_in=config.sparse_fan_in,
        dense_taps=dense_taps,
    )


def solve_equal_width(base: nw.ModelConfig, target: int, n_hidden: int | None = None) -> int:
    """Hidden width for a no-delay net of n_hidden equal layers whose
    parameter count comes closest to target."""
    if n_hidden is None:
        n_hidden = len(base.hidden_sizes)
    best = (None, None)
    for g in range(1, 4097):
        cnt = _count_params_raw(base.input_channels, [g] * n_hidden, base.n_classes,
                                False, fan_in=base.sparse_fan_in)
        diff = abs(cnt - target)
        if best[0] is None or diff < best[1]:
            best = (g, diff)
        if cnt > target and diff > best[1]:
            break
    return best[0]


def solve_equal_fan_in(base: nw.ModelConfig, target: int) -> int:
    """Fan-in for a no-delay net of the base's layer sizes that matches target."""
    best = (None, None)
    hi = max([base.input_channels] + list(base.hidden_sizes))
    for f in range(1, hi + 1):
        cnt = _count_params_raw(base.input_channels, base.hidden_sizes, base.n_classes,
                                False, fan_in=f)
        diff = abs(cnt - target)
        if best[0] is None or diff < best[1]:
            best = (f, diff)
    return best[0]


def config_for_mode(base: nw.ModelConfig, mode: AblationMode) -> nw.ModelConfig:
    """Derive the architecture an ablation arm trains, resizing no-delay
    baselines so learnable parameter counts match the delayed model to ~2%."""
    cfg = copy.deepcopy(base)
    if mode in (AblationMode.DECREASING_SIGMA, AblationMode.CONSTANT_SIGMA,
                AblationMode.FIXED_RANDOM_DELAYS, AblationMode.FIXED_WEIGHTS_DECREASING_SIGMA):
        return cfg
    if mode is AblationMode.DENSE_CONV_BASELINE:
        cfg.dense_conv = True
        return cfg
    target = count_params(base)
    cfg.use_delays = False
    cfg.kernel_size = [1] * (len(cfg.hidden_sizes) + 1)
    if base.sparse_fan_in is not None:
        cfg.sparse_fan_in = solve_equal_fan_in(base, target)
        return cfg
    n_hidden = len(base.hidden_sizes) + (1 if mode is AblationMode.NO_DELAYS_DEEPER else 0)
    width = solve_equal_width(base, target, n_hidden)
    cfg.hidden_sizes = [width] * n_hidden
    tau0 = base.tau_ms[0]
    cfg.tau_ms = [tau0] * n_hidden + [base.tau_ms[-1]]
    cfg.kernel_size = [1] * (n_hidden + 1)
    # rebuild broadcast invariants for the new depth
    return nw.ModelConfig(**{**_cfg_dict(cfg), "hidden_sizes": cfg.hidden_sizes,
                             "kernel_size": cfg.kernel_size, "tau_ms": cfg.tau_ms})


def _cfg_dict(cfg: nw.ModelConfig) -> dict:
    import dataclasses
    return dataclasses.asdict(cfg)


@dataclass
class EpochRecord:
    epoch: int
    sigma: float
    lr_w: float          # weight lr at the epoch's first step
    lr_w_end: float      # and at its last step
    lr_d: float
    train_loss: float
    train_acc: float
    val_acc: float | None
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch, "sigma": self.sigma, "lr_w": self.lr_w,
            "lr_w_end": self.lr_w_end, "lr_d": self.lr_d,
            "train_loss": self.train_loss, "train_acc": self.train_acc,
            "val_acc": self.val_acc, "wall_ms": self.wall_ms,
        })


def evaluate(model: nw.Model, dataset: SpikeDataset, batch_size: int = 256) -> dict:
    """Deterministic eval with rounded single-tap kernels; returns accuracy
    and mean cross-entropy."""
    hits = 0
    loss_sum = 0.0
    n = 0
    for batch in make_batches(dataset, batch_size):
        y_hat, _ = nw.model_forward(model, batch.data, batch.valid_lengths,
                                    training=False, discrete=True)
        loss, _ = nw.cross_entropy_loss(y_hat, batch.labels)
        b = len(batch.labels)
        hits += int(round(nw.accuracy(y_hat, batch.labels) * b))
        loss_sum += loss * b
        n += b
    return {"accuracy": hits / max(n, 1), "loss": loss_sum / max(n, 1), "n": n}


def _snapshot(model: nw.Model) -> dict:
    state = {k: v.copy() for k, v in model.parameters().items()}
    for i, bn in enumerate(model.bns):
        state[f"bn{i}.running_mean"] = bn.running_mean.copy()
        state[f"bn{i}.running_var"] = bn.running_var.copy()
    return state


def _restore(model: nw.Model, state: dict) -> None:
    for name, arr in model.parameters().items():
        arr[...] = state[name]
    for i, bn in enumerate(model.bns):
        bn.running_mean[:] = state[f"bn{i}.running_mean"]
        bn.running_var[:] = state[f"bn{i}.running_var"]


class Trainer:
    """Owns the model, two Adam groups, the schedules, and the log.

    The ablation mode decides which groups step; frozen groups keep exactly
    their initial values.  Delays are clamped to [0, T_d - 1] after every
    optimizer step.
    """

    def __init__(self, model_cfg: nw.ModelConfig, train_cfg: TrainConfig,
                 train_ds: SpikeDataset, val_ds: SpikeDataset | None = None,
                 checkpoint_path=None, log_path=None):
        self.mode = train_cfg.mode
        self.model_cfg = config_for_mode(model_cfg, self.mode)
        self.train_cfg = train_cfg
        self.model = nw.build_model(self.model_cfg, train_cfg.seed)
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.checkpoint_path = checkpoint_path
        self.log_path = log_path
        self.adam_w = AdamState()
        self.adam_d = AdamState()
        self.history: list[EpochRecord] = []
        self.best_val = -1.0
        self.best_state = _snapshot(self.model)
        max_T_d = max(self.model_cfg.kernel_size)
        horizon = train_cfg.sigma_epochs or train_cfg.epochs
        self.sigma_sched = dl.SigmaSchedule(
            sigma0=max_T_d / 2.0,
            total_epochs=max(horizon, 2),
            sigma_min=train_cfg.sigma_min,
            mode=self.mode.sigma_mode,
        )
        self._dropout_rng = SeededRng(train_cfg.seed, nw.STREAM_DROPOUT)

    def _delay_params(self) -> dict:
        names = self.model.param_groups()["delays"]
        params = self.model.parameters()
        return {n: params[n] for n in names}

    def _weight_params(self) -> dict:
        names = self.model.param_groups()["weights"]
        params = self.model.parameters()
        return {n: params[n] for n in names}

    def train(self) -> dict:
        cfg = self.train_cfg
        n_batches = (len(self.train_ds) + cfg.batch_size - 1) // cfg.batch_size
        total_steps = max(cfg.epochs * n_batches, 1)
        global_step = 0
        log_fh = open(self.log_path, "w") if self.log_path else None
        try:
            for epoch in range(cfg.epochs):
                t_start = time.perf_counter()
                sigma = dl.sigma_at_epoch(self.sigma_sched, epoch)
                self.model.set_sigma(sigma)
                lr_d = cosine_anneal_lr(epoch, max(cfg.epochs, 1), cfg.lr_d)
                lr_w_first = one_cycle_lr(min(global_step, total_steps - 1), total_steps, cfg.lr_w)
                loss_sum, hits, seen = 0.0, 0, 0
                shuffle_rng = SeededRng(cfg.seed, nw.STREAM_SHUFFLE_BASE + epoch)
                for batch in make_batches(self.train_ds, cfg.batch_size, shuffle_rng, shuffle=True):
                    lr_w = one_cycle_lr(global_step, total_steps, cfg.lr_w)
                    y_hat, cache = nw.model_forward(
                        self.model, batch.data, batch.valid_lengths,
                        training=True, dropout_rng=self._dropout_rng, discrete=False)
                    loss, grad_y = nw.cross_entropy_loss(y_hat, batch.labels)
                    if not np.isfinite(loss):
                        raise NumericsError(
                            f"non-finite loss at epoch {epoch} step {global_step} "
                            f"(sigma={sigma:.4f}, lr_w={lr_w:.2e}, lr_d={lr_d:.2e})")
                    grads = nw.model_backward(self.model, cache, grad_y)
                    if self.mode.trains_weights:
                        wp = self._weight_params()
                        adam_step(self.adam_w, wp, {n: grads[n] for n in wp}, lr_w)
                    dp = self._delay_params()
                    if dp and self.mode.trains_delays:
                        adam_step(self.adam_d, dp, {n: grads[n] for n in dp}, lr_d)
                    for conn in self.model.delay_connections():
                        dl.clamp_delays(conn)
                    b = len(batch.labels)
                    loss_sum += loss * b
                    hits += int(round(nw.accuracy(y_hat, batch.labels) * b))
                    seen += b
                    global_step += 1
                val_acc = None
                if self.val_ds is not None and (
                        epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
                    val_acc = evaluate(self.model, self.val_ds)["accuracy"]
                    if val_acc > self.best_val:
                        self.best_val = val_acc
                        self.best_state = _snapshot(self.model)
                        if self.checkpoint_path:
                            nw.save_checkpoint(self.checkpoint_path, self.model,
                                               extra={"epoch": epoch, "val_acc": val_acc})
                lr_w_last = one_cycle_lr(max(global_step - 1, 0), total_steps, cfg.lr_w)
                rec = EpochRecord(
                    epoch=epoch, sigma=sigma, lr_w=float(lr_w_first),
                    lr_w_end=float(lr_w_last), lr_d=float(lr_d),
                    train_loss=loss_sum / max(seen, 1), train_acc=hits / max(seen, 1),
                    val_acc=val_acc, wall_ms=(time.perf_counter() - t_start) * 1e3)
                self.history.append(rec)
                if log_fh:
                    log_fh.write(rec.to_json() + "\n")
                    log_fh.flush()
        finally:
            if log_fh:
                log_fh.close()
        if cfg.epochs == 0:
            if self.val_ds is not None:
                self.best_val = evaluate(self.model, self.val_ds)["accuracy"]
            self.best_state = _snapshot(self.model)
            if self.checkpoint_path:
                nw.save_checkpoint(self.checkpoint_path, self.model,
                                   extra={"epoch": -1, "val_acc": self.best_val})
        return {
            "epochs": cfg.epochs,
            "best_val_acc": self.best_val if self.val_ds is not None else None,
            "final_train_acc": self.history[-1].train_acc if self.history else None,
        }

    def restore_best(self) -> None:
        _restore(self.model, self.best_state)


# ---------------------------------------------------------------------------
# Gradient checking.

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    per_group: dict
    worst: str
    model_desc: str


def _param_kind(name: str) -> str:
    if name.endswith(".d"):
        return "delays"
    if name.endswith(".gamma"):
        return "bn_gamma"
    if name.endswith(".beta"):
        return "bn_beta"
    return "weights"


def grad_check(seed: int, model_cfg: nw.ModelConfig | None = None,
               tolerance: float = 1e-4, fd_step: float = 1e-5,
               max_entries_per_tensor: int | None = None) -> GradCheckReport:
    """Compare the analytic backward pass against central finite differences
    on a float64 model with the smooth surrogate-consistent forward.

    Some delays are pinned to the interval endpoints 0 and T_d - 1 so the
    check covers the clamp boundary.
    """
    rng = SeededRng(seed, 0)
    if model_cfg is None:
        h1, h2 = (int(v) for v in rng.integers(4, 9, 2))
        T_d = int(rng.integers(6, 9))
        model_cfg = nw.ModelConfig(
            input_channels=3, hidden_sizes=[h1, h2], n_classes=4,
            kernel_size=T_d, kernel_count=1 + seed % 2, tau_ms=4.0,
            delta_t_ms=1.0, dropout_rate=0.0, smooth_mode=True)
    else:
        model_cfg = copy.deepcopy(model_cfg)
        model_cfg.smooth_mode = True
        model_cfg.dropout_rate = 0.0
    model = nw.build_model(model_cfg, seed, dtype=np.float64)
    for conn in model.delay_connections():
        conn.d.flat[0] = 0.0
        conn.d.flat[-1] = conn.kernel_size - 1.0
    T = 16
    B = 3
    data = rng.poisson(0.4, (B, model_cfg.input_channels, T)).astype(np.float64)
    lengths = np.array([T, T - 3, T - 6])
    labels = rng.integers(0, model_cfg.n_classes, B)

    def loss_only():
        y, cache = nw.model_forward(model, data, lengths, training=True, discrete=False)
        return nw.cross_entropy_loss(y, labels) + (cache,)

    loss0, grad_y, cache = loss_only()
    grads = nw.model_backward(model, cache, grad_y)
    params = model.parameters()
    per_group = {"weights": 0.0, "delays": 0.0, "bn_gamma": 0.0, "bn_beta": 0.0}
    worst = (0.0, "none")
    for name, arr in params.items():
        gname = _param_kind(name)
        g = grads[name].reshape(-1)
        flat = arr.reshape(-1)
        if max_entries_per_tensor and flat.size > max_entries_per_tensor:
            idxs = np.linspace(0, flat.size - 1, max_entries_per_tensor).astype(int)
        else:
            idxs = range(flat.size)
        for k in idxs:
            orig = flat[k]
            flat[k] = orig + fd_step
            lp = loss_only()[0]
            flat[k] = orig - fd_step
            lm = loss_only()[0]
            flat[k] = orig
            fd = (lp - lm) / (2 * fd_step)
            err = abs(fd - g[k]) / max(abs(fd), abs(g[k]), 1e-6)
            per_group[gname] = max(per_group[gname], err)
            if err > worst[0]:
                worst = (err, f"{name}[{k}]: analytic={g[k]:.6e} fd={fd:.6e}")
    max_err = max(per_group.values()) if per_group else 0.0
    return GradCheckReport(
        passed=max_err <= tolerance,
        max_rel_err=max_err,
        per_group=per_group,
        worst=worst[1],
        model_desc=(f"hidden={model_cfg.hidden_sizes} T_d={model_cfg.kernel_size} "
                    f"m={model_cfg.kernel_count} seed={seed}"),
    )


# ---------------------------------------------------------------------------
# Ablation suite.

def mean_ci95(values) -> tuple[float, float]:
    """Sample mean and half-width of the 95% t-interval."""
    arr = np.asarray(values, np.float64)
    mean = float(arr.mean())
    if len(arr) < 2:
        return mean, 0.0
    half = float(stats.t.ppf(0.975, len(arr) - 1) * arr.std(ddof=1) / np.sqrt(len(arr)))
    return mean, half


def run_ablation_suite(model_cfg: nw.ModelConfig, train_cfg: TrainConfig,
                       modes, seeds, train_ds: SpikeDataset,
                       val_ds: SpikeDataset, test_ds: SpikeDataset,
                       progress=None) -> list:
    """Train every (mode, seed) pair on the same data splits and report
    test accuracy of each run's best-validation state.

    Seeds are shared across modes, so arms with matching shapes start from
    identical weights, masks and delays.
    """
    rows = []
    for mode_name in modes:
        mode = AblationMode.from_string(mode_name)
        accs, n_params = [], None
        for seed in seeds:
            cfg = copy.deepcopy(train_cfg)
            cfg.seed = seed
            cfg.ablation = mode.value
            trainer = Trainer(model_cfg, cfg, train_ds, val_ds)
            trainer.train()
            trainer.restore_best()
            acc = evaluate(trainer.model, test_ds)["accuracy"]
            accs.append(acc)
            n_params = trainer.model.count_learnable()
            if progress:
                progress(mode.value, seed, acc)
        mean, half = mean_ci95(accs)
        rows.append({
            "mode": mode.value,
            "seeds": list(seeds),
            "accuracies": accs,
            "mean": mean,
            "ci95": half,
            "n_params": n_params,
        })
    return rows
