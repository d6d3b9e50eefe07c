"""Learnable per-synapse delays as Gaussian-interpolated convolution taps.

Each synapse (i, j) holds m (weight, delay) pairs.  During training the
kernel is a sum of normalized Gaussians of shared standard deviation sigma,
centered at tap position T_d - delay - 1, which makes the delay a continuous
parameter with exact gradients.  Sigma decays exponentially per epoch from
T_d / 2 down to 0.5 so kernels start broad (long-range exploration) and end
nearly discrete.  For evaluation the kernel is collapsed to one rounded tap
per (weight, delay) pair, which reproduces pure shift-and-scale semantics
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import SeededRng

EPSILON = 1e-7          # normalization guard, assumes float32 tensors
SIGMA_MIN = 0.5
# Delays may drift past [0, T_d-1] by at most this much before build treats
# it as a missed clamp; finite-difference probes (h = 1e-5) stay within it.
DELAY_SLACK = 1e-3


@dataclass
class DelayedSynapseLayer:
    """Weights w and delays d, both [C_out, C_in, m]; shared scalar sigma.

    kernel_size (T_d) is the maximum representable delay in steps plus one.
    mask, when present, is a fixed binary [C_out, C_in] connectivity pattern:
    masked synapses contribute nothing and receive zero gradients.
    """

    w: np.ndarray
    d: np.ndarray
    sigma: float
    kernel_size: int
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.w.shape != self.d.shape or self.w.ndim != 3:
            raise ValueError(f"w/d must share a [C_out, C_in, m] shape, got {self.w.shape} / {self.d.shape}")
        if self.mask is not None and self.mask.shape != self.w.shape[:2]:
            raise ValueError(f"mask shape {self.mask.shape} != {self.w.shape[:2]}")

    @property
    def c_out(self) -> int:
        return self.w.shape[0]

    @property
    def c_in(self) -> int:
        return self.w.shape[1]

    @property
    def kernel_count(self) -> int:
        return self.w.shape[2]


def create_layer(
    c_in: int,
    c_out: int,
    kernel_size: int,
    kernel_count: int,
    weight_rng: SeededRng,
    delay_rng: SeededRng,
    mask: np.ndarray | None = None,
    dtype=np.float32,
) -> DelayedSynapseLayer:
    """Uniform weight init in +-1/sqrt(fan_in * m), uniform delays over range."""
    fan_in = c_in if mask is None else max(1, int(round(float(mask.sum(axis=1).mean()))))
    bound = 1.0 / np.sqrt(fan_in * kernel_count)
    w = weight_rng.uniform(-bound, bound, (c_out, c_in, kernel_count)).astype(dtype)
    d = init_delays(delay_rng, (c_out, c_in, kernel_count), kernel_size).astype(dtype)
    return DelayedSynapseLayer(
        w=w, d=d, sigma=kernel_size / 2.0, kernel_size=kernel_size,
        mask=None if mask is None else mask.astype(dtype),
    )


def _gaussian_taps(layer: DelayedSynapseLayer):
    # phi[i,j,p,n] = exp(-((n - mu_ijp) / sigma)^2 / 2), mu = T_d - 1 - d
    T_d = layer.kernel_size
    dtype = layer.w.dtype
    n = np.arange(T_d, dtype=dtype)
    mu = (T_d - 1.0) - layer.d[..., None]          # [C_out, C_in, m, 1]
    z = (n - mu) / dtype.type(layer.sigma)
    phi = np.exp(-0.5 * z * z)
    c = dtype.type(EPSILON) + phi.sum(axis=-1, keepdims=True)
    return phi, c, n, mu


def build_gaussian_kernels(layer: DelayedSynapseLayer) -> np.ndarray:
    """Interpolated kernels [C_out, C_in, T_d] for the current sigma.

    kernels[i,j,n] = sum_p mask[i,j] * (w[i,j,p] / c_ijp)
                     * exp(-((n - T_d + d[i,j,p] + 1) / sigma)^2 / 2)
    with c the epsilon-guarded sum of the Gaussian taps, so each pair
    contributes total mass w (up to a relative epsilon).
    """
    if layer.sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {layer.sigma}")
    lo, hi = float(layer.d.min()), float(layer.d.max())
    if lo < -DELAY_SLACK or hi > layer.kernel_size - 1 + DELAY_SLACK:
        raise ValueError(
            f"delays out of range [0, {layer.kernel_size - 1}]: min={lo}, max={hi} (missed clamp?)"
        )
    phi, c, _, _ = _gaussian_taps(layer)
    kernels = ((layer.w[..., None] / c) * phi).sum(axis=2)
    if layer.mask is not None:
        kernels = kernels * layer.mask[:, :, None]
    return kernels


def gaussian_kernels_backward(
    layer: DelayedSynapseLayer, grad_kernels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact adjoints (grad_w, grad_d) of build_gaussian_kernels.

    Includes the dependence of the normalization term on the delay; sigma is
    not learned and receives no gradient.  Masked synapses get exact zeros.
    """
    T_d = layer.kernel_size
    if grad_kernels.shape != (layer.c_out, layer.c_in, T_d):
        raise ValueError(
            f"grad_kernels shape {grad_kernels.shape} != {(layer.c_out, layer.c_in, T_d)}"
        )
    dtype = layer.w.dtype
    phi, c, n, mu = _gaussian_taps(layer)
    sig2 = dtype.type(layer.sigma) ** 2
    psi = -phi * (n - mu) / sig2                   # d phi / d delay
    gk = grad_kernels[:, :, None, :]
    A = (gk * phi).sum(axis=-1)                    # [C_out, C_in, m]
    Bq = (gk * psi).sum(axis=-1)
    Cs = psi.sum(axis=-1)
    c2 = c[..., 0]
    grad_w = A / c2
    grad_d = layer.w * (Bq - A * Cs / c2) / c2
    if layer.mask is not None:
        grad_w = grad_w * layer.mask[:, :, None]
        grad_d = grad_d * layer.mask[:, :, None]
    return grad_w.astype(dtype, copy=False), grad_d.astype(dtype, copy=False)


@dataclass
class DiscreteKernels:
    """Rounded one-tap-per-pair kernels: taps are (i, j, n, weight) sorted
    lexicographically by (i, j, n)."""

    c_out: int
    c_in: int
    kernel_size: int
    taps: list[tuple[int, int, int, float]]

    def to_dense(self, dtype=np.float32) -> np.ndarray:
        dense = np.zeros((self.c_out, self.c_in, self.kernel_size), dtype)
        for i, j, n, w in self.taps:
            dense[i, j, n] += w
        return dense


def discretize(layer: DelayedSynapseLayer) -> DiscreteKernels:
    """Collapse each (weight, delay) pair to the single tap at
    n = T_d - round(d) - 1 (round half-up).  Convolving with the result
    equals delaying each input train by round(d) steps and scaling by w."""
    T_d = layer.kernel_size
    rounded = np.floor(layer.d.astype(np.float64) + 0.5).astype(np.int64)
    rounded = np.clip(rounded, 0, T_d - 1)
    taps = []
    for i in range(layer.c_out):
        for j in range(layer.c_in):
            if layer.mask is not None and layer.mask[i, j] == 0:
                continue
            for p in range(layer.kernel_count):
                n = int(T_d - rounded[i, j, p] - 1)
                taps.append((i, j, n, float(layer.w[i, j, p])))
    taps.sort(key=lambda t: (t[0], t[1], t[2]))
    return DiscreteKernels(layer.c_out, layer.c_in, T_d, taps)


def discrete_conv_forward(x: np.ndarray, discrete: DiscreteKernels) -> np.ndarray:
    """Apply discretized kernels as literal shift-and-scale accumulation.

    x: [B, C_in, T] -> [B, C_out, T].  Equivalent to convolving with
    to_dense(), but accumulates tap by tap in stored (i, j, n) order, so the
    result is bit-identical to a scalar oracle that adds w * x[b, j, t - d]
    in the same order.  Also much cheaper than a dense convolution once each
    synapse has collapsed to a single tap.
    """
    B, C_in, T = x.shape
    if C_in != discrete.c_in:
        raise ValueError(f"channel mismatch: input has {C_in}, kernels expect {discrete.c_in}")
    T_d = discrete.kernel_size
    out = np.zeros((B, discrete.c_out, T), x.dtype)
    for i, j, n, w in discrete.taps:
        d = T_d - 1 - n
        if d == 0:
            out[:, i, :] += w * x[:, j, :]
        elif d < T:
            out[:, i, d:] += w * x[:, j, : T - d]
    return out


@dataclass
class SigmaSchedule:
    """Per-epoch standard-deviation decay, monotone nonincreasing."""

    sigma0: float
    total_epochs: int
    sigma_min: float = SIGMA_MIN
    mode: str = "exponential"     # exponential | constant

    def __post_init__(self) -> None:
        if self.mode not in ("exponential", "constant"):
            raise ValueError(f"unknown sigma schedule mode {self.mode!r}")
        if self.mode == "exponential" and self.total_epochs < 2:
            raise ValueError("exponential schedule needs total_epochs >= 2")

    @classmethod
    def for_kernel(cls, kernel_size: int, total_epochs: int, mode: str = "exponential") -> "SigmaSchedule":
        return cls(sigma0=kernel_size / 2.0, total_epochs=total_epochs, mode=mode)


def sigma_at_epoch(sched: SigmaSchedule, epoch: int) -> float:
    """Exponential: sigma0 * rho^epoch with rho chosen so the schedule's last
    epoch lands exactly on sigma_min; later epochs hold there, so a horizon
    shorter than the training run anneals fast then stays sharp.  Constant:
    sigma_min throughout."""
    if epoch < 0:
        raise ValueError(f"epoch {epoch} is negative")
    if sched.mode == "constant":
        return sched.sigma_min
    e = min(epoch, sched.total_epochs - 1)
    rho = (sched.sigma_min / sched.sigma0) ** (1.0 / (sched.total_epochs - 1))
    return max(sched.sigma_min, sched.sigma0 * rho**e)


def clamp_delays(layer: DelayedSynapseLayer) -> None:
    """In-place clamp to [0, T_d - 1]; call after every optimizer step."""
    np.clip(layer.d, 0.0, layer.kernel_size - 1.0, out=layer.d)


def init_delays(rng: SeededRng, shape, kernel_size: int) -> np.ndarray:
    """I.i.d. uniform delays over the full representable range [0, T_d - 1]."""
    if kernel_size < 1:
        raise ValueError("kernel_size must be >= 1")
    if kernel_size == 1:
        return np.zeros(shape, np.float64)
    return rng.uniform(0.0, kernel_size - 1.0, shape)


def make_sparse_mask(rng: SeededRng, c_out: int, c_in: int, fan_in: int) -> np.ndarray:
    """Binary [C_out, C_in] mask with exactly fan_in ones per output row,
    chosen uniformly without replacement; fixed for the whole run."""
    if fan_in > c_in:
        raise ValueError(f"fan_in {fan_in} exceeds c_in {c_in}")
    mask = np.zeros((c_out, c_in), np.float32)
    if fan_in == 0:
        return mask
    order = np.argsort(rng.gen.random((c_out, c_in)), axis=1)[:, :fan_in]
    rows = np.repeat(np.arange(c_out), fan_in)
    mask[rows, order.ravel()] = 1.0
    return mask


def export_taps_doc(discretized: list[DiscreteKernels]) -> dict:
    """JSON-ready document for discretized networks (cli export-kernels)."""
    return {
        "layers": [
            {
                "c_out": dk.c_out,
                "c_in": dk.c_in,
                "T_d": dk.kernel_size,
                "taps": [[i, j, n, w] for i, j, n, w in dk.taps],
            }
            for dk in discretized
        ]
    }
