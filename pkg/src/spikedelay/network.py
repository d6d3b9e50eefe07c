"""Feedforward spiking network assembly: conv -> batchnorm -> LIF -> dropout
per hidden layer, then a delayed readout into non-firing integrators whose
per-step class softmax is summed over each sample's valid timesteps.

Supports three connection flavors: delayed synapses (Gaussian kernels while
training, rounded single taps for evaluation), plain dense kernels used for
the dense-conv ablation, and the T_d = 1 special case that reduces exactly
to a weight matrix (no-delay baselines).  Batch statistics are computed over
valid timesteps only, so ragged batches behave as if each sample were
processed at its own length.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np

from . import delay_layers as dl
from .core_math import (
    DEFAULT_DTYPE,
    SeededRng,
    check_finite,
    conv1d_causal_backward,
    conv1d_causal_forward,
    softmax_lastdim,
    softmax_lastdim_backward,
)
from .neurons import LIFConfig, LIFTrace, lif_backward, lif_forward

CHECKPOINT_MAGIC = b"SNNDLY01"

# Seed stream offsets; one stream per connection keeps initializations
# identical across ablation arms that share shapes.
_STREAM_WEIGHTS = 10
_STREAM_DELAYS = 200
_STREAM_MASKS = 400
STREAM_DROPOUT = 600
STREAM_SHUFFLE_BASE = 1000


@dataclass
class ModelConfig:
    """Architecture plus shared neuron/optimizer-facing constants.

    tau_ms and kernel_size accept scalars (broadcast) or per-layer lists;
    tau_ms needs one entry per hidden layer plus one for the readout.
    """

    input_channels: int
    hidden_sizes: list
    n_classes: int
    kernel_size: object = 26
    kernel_count: int = 1
    tau_ms: object = 20.0
    delta_t_ms: float = 1.0
    dropout_rate: float = 0.25
    v_threshold: float = 1.0
    surrogate_alpha: float = 2.0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    # Small initial gains keep normalized currents well below the firing
    # threshold, so early training only crosses it on aligned arrivals.
    bn_gamma_init: float = 1.0
    use_delays: bool = True
    dense_conv: bool = False
    pad_right: bool = False
    smooth_mode: bool = False
    sparse_fan_in: int | None = None

    def __post_init__(self) -> None:
        self.hidden_sizes = [int(h) for h in self.hidden_sizes]
        n_conn = len(self.hidden_sizes) + 1
        if isinstance(self.kernel_size, (int, float)):
            self.kernel_size = [int(self.kernel_size)] * n_conn
        else:
            self.kernel_size = [int(k) for k in self.kernel_size]
        if isinstance(self.tau_ms, (int, float)):
            self.tau_ms = [float(self.tau_ms)] * n_conn
        else:
            self.tau_ms = [float(t) for t in self.tau_ms]
        if len(self.kernel_size) != n_conn:
            raise ValueError(f"kernel_size needs {n_conn} entries, got {len(self.kernel_size)}")
        if len(self.tau_ms) != n_conn:
            raise ValueError(f"tau_ms needs {n_conn} entries, got {len(self.tau_ms)}")
        if not self.hidden_sizes:
            raise ValueError("need at least one hidden layer")
        if min(self.hidden_sizes) < 1 or self.input_channels < 1 or self.n_classes < 2:
            raise ValueError("invalid layer sizing")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if not self.use_delays:
            # no-delay baseline is exactly a per-step weight matrix
            self.kernel_size = [1] * n_conn

    @property
    def layer_widths(self) -> list:
        return [self.input_channels] + self.hidden_sizes + [self.n_classes]

    def tau_steps(self, idx: int) -> float:
        steps = self.tau_ms[idx] / self.delta_t_ms
        if steps <= 1.0:
            raise ValueError(f"tau of {self.tau_ms[idx]}ms at {self.delta_t_ms}ms steps gives tau_steps <= 1")
        return steps


@dataclass
class DenseConvConnection:
    """Unconstrained kernels [C_out, C_in, T_d]; the ablation control where
    every tap is free instead of one Gaussian bump per synapse pair."""

    kernels: np.ndarray
    mask: np.ndarray | None = None

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[2]

    def effective_kernels(self) -> np.ndarray:
        if self.mask is None:
            return self.kernels
        return self.kernels * self.mask[:, :, None]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5,
               dtype=DEFAULT_DTYPE, gamma0: float = 1.0) -> "BatchNormParams":
        return cls(
            gamma=np.full(channels, gamma0, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            momentum=momentum,
            eps=eps,
        )


def bn_forward(
    x: np.ndarray,
    p: BatchNormParams,
    valid_mask: np.ndarray | None,
    training: bool,
):
    """Per-channel normalization over (batch, valid timesteps).

    Padded positions are normalized with the same statistics (their values
    never reach the loss: downstream sums are gated by the valid mask) but
    excluded from mean/variance so ragged batches match per-sample runs.
    Returns (y, cache); cache is None in eval mode.
    """
    B, C, T = x.shape
    dtype = x.dtype
    if not training:
        scale = (p.gamma / np.sqrt(p.running_var + p.eps)).astype(dtype)
        shift = (p.beta - p.running_mean * scale).astype(dtype)
        return x * scale[None, :, None] + shift[None, :, None], None
    if valid_mask is None:
        n_valid = B * T
        mean = x.mean(axis=(0, 2))
        var = ((x - mean[None, :, None]) ** 2).mean(axis=(0, 2))
    else:
        vm = valid_mask.astype(dtype)[:, None, :]
        n_valid = float(vm.sum()) * 1.0
        if n_valid < 2:
            raise ValueError("batchnorm needs at least 2 valid positions")
        mean = (x * vm).sum(axis=(0, 2)) / n_valid
        var = (((x - mean[None, :, None]) ** 2) * vm).sum(axis=(0, 2)) / n_valid
    inv_std = 1.0 / np.sqrt(var + dtype.type(p.eps))
    x_hat = (x - mean[None, :, None]) * inv_std[None, :, None]
    y = p.gamma[None, :, None] * x_hat + p.beta[None, :, None]
    unbiased = var * (n_valid / max(n_valid - 1.0, 1.0))
    p.running_mean[:] = (1 - p.momentum) * p.running_mean + p.momentum * mean
    p.running_var[:] = (1 - p.momentum) * p.running_var + p.momentum * unbiased
    cache = (x_hat, inv_std, valid_mask, float(n_valid), p.gamma.copy())
    return y, cache


def bn_backward(cache, grad_y: np.ndarray):
    """Adjoint of training-mode bn_forward.

    Gradients through the shared statistics flow only into valid positions;
    the pointwise normalization path covers every position.
    """
    x_hat, inv_std, valid_mask, n_valid, gamma = cache
    grad_gamma = (grad_y * x_hat).sum(axis=(0, 2))
    grad_beta = grad_y.sum(axis=(0, 2))
    coeff = (gamma * inv_std)[None, :, None]
    stat = (grad_beta[None, :, None] + x_hat * grad_gamma[None, :, None]) / n_valid
    if valid_mask is None:
        grad_x = coeff * (grad_y - stat)
    else:
        vm = valid_mask.astype(grad_y.dtype)[:, None, :]
        grad_x = coeff * (grad_y - vm * stat)
    return grad_x, grad_gamma.astype(gamma.dtype), grad_beta.astype(gamma.dtype)


def dropout_forward(x: np.ndarray, rate: float, rng: SeededRng, training: bool):
    """Spiking dropout: one keep/drop decision per (sample, channel), applied
    across all timesteps, with inverted scaling so eval needs no rescale."""
    if not training or rate == 0.0:
        return x, None
    B, C, _ = x.shape
    keep = (rng.gen.random((B, C)) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * keep[:, :, None], keep


@dataclass
class Model:
    config: ModelConfig
    connections: list
    bns: list
    lif_cfgs: list
    readout_cfg: LIFConfig
    dtype: object = DEFAULT_DTYPE

    @property
    def n_hidden(self) -> int:
        return len(self.config.hidden_sizes)

    def delay_connections(self):
        return [c for c in self.connections if isinstance(c, dl.DelayedSynapseLayer)]

    def set_sigma(self, sigma: float) -> None:
        for conn in self.delay_connections():
            conn.sigma = float(sigma)

    def parameters(self) -> dict:
        """Flat name -> array view of every learnable tensor."""
        params = {}
        for i, conn in enumerate(self.connections):
            if isinstance(conn, dl.DelayedSynapseLayer):
                params[f"conn{i}.w"] = conn.w
                params[f"conn{i}.d"] = conn.d
            else:
                params[f"conn{i}.kernels"] = conn.kernels
        for i, bn in enumerate(self.bns):
            params[f"bn{i}.gamma"] = bn.gamma
            params[f"bn{i}.beta"] = bn.beta
        return params

    def param_groups(self) -> dict:
        """Two optimizer groups: synaptic weights (+BN affine) and delays."""
        weights, delays = [], []
        for name in self.parameters():
            (delays if name.endswith(".d") else weights).append(name)
        return {"weights": weights, "delays": delays}

    def count_learnable(self) -> int:
        masked = 0
        for i, conn in enumerate(self.connections):
            if isinstance(conn, dl.DelayedSynapseLayer):
                if conn.mask is not None:
                    masked += 2 * int((1 - conn.mask).sum()) * conn.kernel_count
            elif conn.mask is not None:
                masked += int((1 - conn.mask).sum()) * conn.kernel_size
        return sum(p.size for p in self.parameters().values()) - masked


def build_model(config: ModelConfig, seed: int, dtype=DEFAULT_DTYPE) -> Model:
    """Deterministic construction; per-connection seed streams make arms that
    share shapes start from identical weights, delays and masks."""
    widths = config.layer_widths
    connections = []
    for i in range(len(widths) - 1):
        c_in, c_out, T_d = widths[i], widths[i + 1], config.kernel_size[i]
        mask = None
        if config.sparse_fan_in is not None:
            # a row cannot draw more inputs than the layer has; clamp to
            # c_in, matching the eff_in = min(fan_in, c_in) the parameter
            # counter uses
            mask = dl.make_sparse_mask(
                SeededRng(seed, _STREAM_MASKS + i), c_out, c_in,
                min(config.sparse_fan_in, c_in)
            ).astype(dtype)
        if config.use_delays and not config.dense_conv and T_d > 1:
            conn = dl.create_layer(
                c_in, c_out, T_d, config.kernel_count,
                weight_rng=SeededRng(seed, _STREAM_WEIGHTS + i),
                delay_rng=SeededRng(seed, _STREAM_DELAYS + i),
                mask=mask, dtype=dtype,
            )
        else:
            fan_in = c_in if mask is None else max(1, int(round(float(mask.sum(axis=1).mean()))))
            bound = 1.0 / np.sqrt(fan_in * T_d)
            kernels = SeededRng(seed, _STREAM_WEIGHTS + i).uniform(
                -bound, bound, (c_out, c_in, T_d)
            ).astype(dtype)
            conn = DenseConvConnection(kernels=kernels, mask=mask)
        connections.append(conn)
    bns = [
        BatchNormParams.create(h, config.bn_momentum, config.bn_eps, dtype,
                               gamma0=config.bn_gamma_init)
        for h in config.hidden_sizes
    ]
    lif_cfgs = [
        LIFConfig(
            tau_steps=config.tau_steps(i),
            v_threshold=config.v_threshold,
            surrogate_alpha=config.surrogate_alpha,
            smooth_mode=config.smooth_mode,
        )
        for i in range(len(config.hidden_sizes))
    ]
    readout_cfg = LIFConfig(
        tau_steps=config.tau_steps(len(config.hidden_sizes)),
        v_threshold=config.v_threshold,
        surrogate_alpha=config.surrogate_alpha,
        infinite_threshold=True,
        smooth_mode=config.smooth_mode,
    )
    return Model(config, connections, bns, lif_cfgs, readout_cfg, dtype)


def connection_kernels(conn, discrete: bool, dtype) -> np.ndarray:
    if isinstance(conn, dl.DelayedSynapseLayer):
        if discrete:
            return dl.discretize(conn).to_dense(dtype)
        return dl.build_gaussian_kernels(conn)
    return conn.effective_kernels()


def _connection_forward(conn, x, discrete: bool, dtype, pad_right: bool):
    """Returns (current, kernels-as-cached).  Eval-time discrete kernels go
    through the tap-ordered shift-and-scale path: single-tap kernels make the
    dense convolution mostly wasted work."""
    if discrete and not pad_right and isinstance(conn, dl.DelayedSynapseLayer):
        dk = dl.discretize(conn)
        return dl.discrete_conv_forward(x, dk), dk
    kernels = connection_kernels(conn, discrete, dtype)
    return conv1d_causal_forward(x, kernels, pad_right=pad_right), kernels


@dataclass
class _LayerCache:
    x_in: np.ndarray
    kernels: np.ndarray
    bn_cache: object
    trace: LIFTrace
    keep: np.ndarray | None


@dataclass
class ForwardCache:
    layer_caches: list
    readout_x: np.ndarray
    readout_kernels: np.ndarray
    readout_trace: LIFTrace
    probs: np.ndarray            # [B, T, K] per-step class softmax
    valid_mask: np.ndarray       # [B, T] in {0, 1}
    training: bool
    discrete: bool


def valid_time_mask(
    valid_lengths: np.ndarray, T: int, extra: int = 0, dtype=np.float32
) -> np.ndarray:
    lengths = np.minimum(np.asarray(valid_lengths, np.int64) + extra, T)
    return (np.arange(T)[None, :] < lengths[:, None]).astype(dtype)


def model_forward(
    model: Model,
    data: np.ndarray,
    valid_lengths: np.ndarray | None = None,
    training: bool = False,
    dropout_rng: SeededRng | None = None,
    discrete: bool | None = None,
):
    """Run the network; returns (y_hat [B, n_classes], ForwardCache).

    discrete defaults to the mode convention: Gaussian kernels while
    training, rounded single-tap kernels in eval.  Class scores are the
    per-step softmax of readout membranes summed over valid timesteps, so
    padding beyond a sample's length cannot change its score.
    """
    cfg = model.config
    if discrete is None:
        discrete = not training
    x = np.ascontiguousarray(data, model.dtype)
    B, C, T = x.shape
    if C != cfg.input_channels:
        raise ValueError(f"input has {C} channels, model expects {cfg.input_channels}")
    if training and cfg.dropout_rate > 0.0 and dropout_rng is None:
        raise ValueError("training forward with dropout needs a dropout_rng")
    if valid_lengths is None:
        valid_lengths = np.full(B, T, np.int64)

    layer_caches = []
    extra = 0
    for i in range(model.n_hidden):
        conn = model.connections[i]
        x_in = x
        current, kernels = _connection_forward(conn, x_in, discrete, model.dtype, cfg.pad_right)
        if cfg.pad_right:
            extra += kernels.shape[2] - 1
        vm = valid_time_mask(valid_lengths, current.shape[2], extra, model.dtype)
        y, bn_cache = bn_forward(current, model.bns[i], vm if training else None, training)
        trace = lif_forward(y, model.lif_cfgs[i])
        spikes, keep = dropout_forward(trace.spikes, cfg.dropout_rate, dropout_rng, training)
        layer_caches.append(_LayerCache(x_in, kernels, bn_cache, trace, keep))
        x = spikes

    r_conn = model.connections[-1]
    readout_x = x
    current, r_kernels = _connection_forward(r_conn, readout_x, discrete, model.dtype, cfg.pad_right)
    if cfg.pad_right:
        extra += r_kernels.shape[2] - 1
    r_trace = lif_forward(current, model.readout_cfg)
    scores = np.ascontiguousarray(r_trace.u.transpose(0, 2, 1))   # [B, T, K]
    probs = softmax_lastdim(scores)
    final_mask = valid_time_mask(valid_lengths, scores.shape[1], extra, model.dtype)
    y_hat = (probs * final_mask[:, :, None]).sum(axis=1)
    check_finite("y_hat", y_hat)
    cache = ForwardCache(
        layer_caches, readout_x, r_kernels, r_trace, probs, final_mask, training, discrete
    )
    return y_hat, cache


def model_backward(model: Model, cache: ForwardCache, grad_y_hat: np.ndarray) -> dict:
    """Exact adjoint of a training-mode forward; returns name -> gradient
    matching parameters().  Masked synapses come back with zero gradient."""
    if not cache.training or cache.discrete:
        raise ValueError("backward needs a training-mode, non-discretized forward cache")
    grads = {}

    g_probs = grad_y_hat[:, None, :] * cache.valid_mask[:, :, None]
    g_scores = softmax_lastdim_backward(cache.probs, g_probs)
    g_u = np.ascontiguousarray(g_scores.transpose(0, 2, 1))
    g_current = lif_backward(cache.readout_trace, model.readout_cfg, None, g_u)
    g_x, g_kern = conv1d_causal_backward(
        cache.readout_x, cache.readout_kernels, g_current,
        pad_right=model.config.pad_right, need_grad_input=True,
    )
    _store_connection_grads(grads, model.connections[-1], len(model.connections) - 1, g_kern)

    for i in reversed(range(model.n_hidden)):
        lc = cache.layer_caches[i]
        if lc.keep is not None:
            g_x = g_x * lc.keep[:, :, None]
        g_bn_out = lif_backward(lc.trace, model.lif_cfgs[i], g_x, None)
        g_conv, g_gamma, g_beta = bn_backward(lc.bn_cache, g_bn_out)
        grads[f"bn{i}.gamma"] = g_gamma
        grads[f"bn{i}.beta"] = g_beta
        g_x, g_kern = conv1d_causal_backward(
            lc.x_in, lc.kernels, g_conv,
            pad_right=model.config.pad_right, need_grad_input=(i > 0),
        )
        _store_connection_grads(grads, model.connections[i], i, g_kern)
    return grads


def _store_connection_grads(grads: dict, conn, idx: int, g_kern: np.ndarray) -> None:
    if isinstance(conn, dl.DelayedSynapseLayer):
        gw, gd = dl.gaussian_kernels_backward(conn, g_kern)
        grads[f"conn{idx}.w"] = gw
        grads[f"conn{idx}.d"] = gd
    else:
        if conn.mask is not None:
            g_kern = g_kern * conn.mask[:, :, None]
        grads[f"conn{idx}.kernels"] = g_kern


def cross_entropy_loss(y_hat: np.ndarray, labels: np.ndarray):
    """Mean CE of softmax(y_hat) against integer labels; returns
    (loss, grad_y_hat).  y_hat already sums per-step probabilities, the
    second softmax turns those accumulated scores into class probabilities."""
    B, K = y_hat.shape
    labels = np.asarray(labels, np.int64)
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels outside [0, {K})")
    z = y_hat.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[np.arange(B), labels]))
    p = np.exp(z - logsumexp[:, None])
    p[np.arange(B), labels] -= 1.0
    grad = (p / B).astype(y_hat.dtype)
    return loss, grad


def accuracy(y_hat: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax hits; ties resolve to the lowest class index."""
    pred = np.argmax(y_hat, axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# ---------------------------------------------------------------------------
# Checkpoint serialization: magic, tagged config block, then raw float32
# tensors in a fixed order derived from the config.

_TAG_INT, _TAG_FLOAT, _TAG_STR, _TAG_BOOL, _TAG_INT_LIST, _TAG_FLOAT_LIST, _TAG_NONE = range(7)


def _write_config(fh, config: ModelConfig) -> None:
    _write_kv_block(fh, dataclasses.asdict(config))


def _write_kv_block(fh, items: dict) -> None:
    fh.write(struct.pack("<I", len(items)))
    for key, value in items.items():
        kb = key.encode()
        fh.write(struct.pack("<H", len(kb)))
        fh.write(kb)
        if value is None:
            fh.write(struct.pack("<B", _TAG_NONE))
        elif isinstance(value, bool):
            fh.write(struct.pack("<BB", _TAG_BOOL, int(value)))
        elif isinstance(value, int):
            fh.write(struct.pack("<Bq", _TAG_INT, value))
        elif isinstance(value, float):
            fh.write(struct.pack("<Bd", _TAG_FLOAT, value))
        elif isinstance(value, str):
            sb = value.encode()
            fh.write(struct.pack("<BI", _TAG_STR, len(sb)))
            fh.write(sb)
        elif isinstance(value, list) and all(isinstance(v, int) for v in value):
            fh.write(struct.pack("<BI", _TAG_INT_LIST, len(value)))
            fh.write(struct.pack(f"<{len(value)}q", *value))
        elif isinstance(value, list):
            fh.write(struct.pack("<BI", _TAG_FLOAT_LIST, len(value)))
            fh.write(struct.pack(f"<{len(value)}d", *[float(v) for v in value]))
        else:
            raise ValueError(f"cannot serialize config field {key}={value!r}")


def _read_kv(fh) -> dict:
    (n_items,) = struct.unpack("<I", fh.read(4))
    items = {}
    for _ in range(n_items):
        (klen,) = struct.unpack("<H", fh.read(2))
        key = fh.read(klen).decode()
        (tag,) = struct.unpack("<B", fh.read(1))
        if tag == _TAG_NONE:
            value = None
        elif tag == _TAG_BOOL:
            value = bool(struct.unpack("<B", fh.read(1))[0])
        elif tag == _TAG_INT:
            value = struct.unpack("<q", fh.read(8))[0]
        elif tag == _TAG_FLOAT:
            value = struct.unpack("<d", fh.read(8))[0]
        elif tag == _TAG_STR:
            (slen,) = struct.unpack("<I", fh.read(4))
            value = fh.read(slen).decode()
        elif tag == _TAG_INT_LIST:
            (count,) = struct.unpack("<I", fh.read(4))
            value = list(struct.unpack(f"<{count}q", fh.read(8 * count)))
        elif tag == _TAG_FLOAT_LIST:
            (count,) = struct.unpack("<I", fh.read(4))
            value = list(struct.unpack(f"<{count}d", fh.read(8 * count)))
        else:
            raise ValueError(f"corrupt checkpoint: unknown config tag {tag}")
        items[key] = value
    return items


def _read_config(fh) -> ModelConfig:
    items = _read_kv(fh)
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(items) - known
    if unknown:
        raise ValueError(f"checkpoint config has unknown fields {sorted(unknown)}")
    return ModelConfig(**items)


def _write_tensor(fh, arr: np.ndarray) -> None:
    arr32 = np.ascontiguousarray(arr, np.float32)
    fh.write(struct.pack("<I", arr32.ndim))
    fh.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
    fh.write(arr32.tobytes())


def _read_tensor(fh, dtype) -> np.ndarray:
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError("corrupt checkpoint: truncated tensor payload")
    return np.frombuffer(raw, "<f4").reshape(shape).astype(dtype)


def _connection_tensors(conn) -> list:
    ones = lambda c: np.ones(c.kernels.shape[:2] if isinstance(c, DenseConvConnection) else c.w.shape[:2], np.float32)
    if isinstance(conn, dl.DelayedSynapseLayer):
        return [conn.w, conn.d, conn.mask if conn.mask is not None else ones(conn)]
    return [conn.kernels, conn.mask if conn.mask is not None else ones(conn)]


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    """Write config, an optional scalar metadata dict, and every tensor."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        _write_config(fh, model.config)
        _write_kv_block(fh, extra or {})
        for conn in model.connections:
            for tensor in _connection_tensors(conn):
                _write_tensor(fh, tensor)
        for bn in model.bns:
            for tensor in (bn.gamma, bn.beta, bn.running_mean, bn.running_var):
                _write_tensor(fh, tensor)


def load_checkpoint(path, dtype=DEFAULT_DTYPE) -> tuple[Model, dict]:
    """Rebuild a model bit-for-bit (up to the float32 storage format);
    returns it with the metadata dict stored at save time."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        config = _read_config(fh)
        extra = _read_kv(fh)
        model = build_model(config, seed=0, dtype=dtype)
        for conn in model.connections:
            if isinstance(conn, dl.DelayedSynapseLayer):
                conn.w = _read_tensor(fh, dtype)
                conn.d = _read_tensor(fh, dtype)
                mask = _read_tensor(fh, dtype)
                conn.mask = None if np.all(mask == 1.0) else mask
            else:
                conn.kernels = _read_tensor(fh, dtype)
                mask = _read_tensor(fh, dtype)
                conn.mask = None if np.all(mask == 1.0) else mask
        for bn in model.bns:
            bn.gamma = _read_tensor(fh, dtype)
            bn.beta = _read_tensor(fh, dtype)
            bn.running_mean = _read_tensor(fh, dtype)
            bn.running_var = _read_tensor(fh, dtype)
        leftover = fh.read(1)
        if leftover:
            raise ValueError("corrupt checkpoint: trailing bytes")
    return model, extra
