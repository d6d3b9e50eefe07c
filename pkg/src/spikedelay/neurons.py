"""Discrete-time leaky integrate-and-fire dynamics with surrogate-gradient
backward through the full temporal recurrence.

Forward recurrence per (batch, channel) lane, zero initial state:

    u[t] = beta * u[t-1] * (1 - S[t-1]) + I[t],   beta = 1 - 1/tau_steps
    S[t] = step(u[t] - threshold)

The hard threshold has no usable derivative, so the backward sweep replaces
d step/du with the arctangent surrogate.  The multiplicative reset is not
detached: gradient flows through both the emitted spike and the reset factor.
In smooth mode the step is replaced by the arctangent sigmoid whose exact
derivative *is* the surrogate, which makes the identical backward code path
finite-difference exact; that mode exists only for gradient checking.

The infinite-threshold variant never spikes and integrates with leak only;
it drives the readout layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_math import check_finite


@dataclass
class LIFConfig:
    tau_steps: float                  # membrane time constant, in timesteps
    v_threshold: float = 1.0
    surrogate_alpha: float = 2.0
    infinite_threshold: bool = False  # integrator mode: no spikes, no reset
    smooth_mode: bool = False         # gradient-check only

    def __post_init__(self) -> None:
        if self.tau_steps <= 1.0:
            raise ValueError(f"tau_steps must be > 1, got {self.tau_steps}")
        if self.surrogate_alpha <= 0.0:
            raise ValueError("surrogate_alpha must be positive")

    @property
    def beta(self) -> float:
        return 1.0 - 1.0 / self.tau_steps


@dataclass
class LIFTrace:
    """Pre-reset membrane potentials and emitted spikes, both [B, C, T]."""

    u: np.ndarray
    spikes: np.ndarray


def surrogate_grad(x, alpha: float):
    """ATan surrogate derivative alpha / (2 (1 + ((pi/2) alpha x)^2)).

    Even in x, peaks at x = 0 with value alpha / 2.
    """
    z = (math.pi / 2.0) * alpha * np.asarray(x)
    return alpha / (2.0 * (1.0 + z * z))


def smooth_spike(x, alpha: float):
    """Arctangent sigmoid arctan((pi/2) alpha x) / pi + 1/2.

    Its exact derivative equals surrogate_grad, so smooth-mode forward plus
    the ordinary surrogate backward is a consistent differentiable system.
    """
    return np.arctan((math.pi / 2.0) * alpha * np.asarray(x)) / math.pi + 0.5


def lif_forward(I: np.ndarray, cfg: LIFConfig) -> LIFTrace:
    """Run the LIF recurrence over input currents I [B, C, T]."""
    if I.ndim != 3:
        raise ValueError(f"expected [B, C, T] currents, got shape {I.shape}")
    check_finite("lif input", I)
    B, C, T = I.shape
    dtype = I.dtype
    beta = dtype.type(cfg.beta)
    u = np.empty((B, C, T), dtype)
    S = np.zeros((B, C, T), dtype)
    carried = np.zeros((B, C), dtype)  # post-reset potential entering step t
    for t in range(T):
        u_t = beta * carried + I[:, :, t]
        u[:, :, t] = u_t
        if cfg.infinite_threshold:
            carried = u_t
        else:
            if cfg.smooth_mode:
                s_t = smooth_spike(u_t - cfg.v_threshold, cfg.surrogate_alpha)
            else:
                s_t = (u_t >= cfg.v_threshold).astype(dtype)
            S[:, :, t] = s_t
            carried = u_t * (1.0 - s_t)
    return LIFTrace(u=u, spikes=S)


def lif_backward(
    trace: LIFTrace,
    cfg: LIFConfig,
    grad_spikes: np.ndarray | None,
    grad_u_readout: np.ndarray | None,
) -> np.ndarray:
    """Reverse-mode sweep of lif_forward; returns grad_I [B, C, T].

    grad_spikes is the upstream gradient on the spike train, grad_u_readout
    the upstream gradient on the membrane potentials (readout use).  Either
    may be None for zero.
    """
    u, S = trace.u, trace.spikes
    B, C, T = u.shape
    for name, g in (("grad_spikes", grad_spikes), ("grad_u_readout", grad_u_readout)):
        if g is not None and g.shape != u.shape:
            raise ValueError(f"{name} shape {g.shape} != trace shape {u.shape}")
    dtype = u.dtype
    beta = dtype.type(cfg.beta)
    grad_I = np.empty((B, C, T), dtype)
    lam = np.zeros((B, C), dtype)  # dL/du[t+1], total
    for t in range(T - 1, -1, -1):
        u_t = u[:, :, t]
        if cfg.infinite_threshold:
            # u[t+1] = beta * u[t] + I[t+1]: plain linear adjoint.
            total = beta * lam
            if grad_u_readout is not None:
                total = total + grad_u_readout[:, :, t]
        else:
            sg = surrogate_grad(u_t - cfg.v_threshold, cfg.surrogate_alpha).astype(
                dtype, copy=False
            )
            # d u[t+1] / d u[t] through the carried term beta*u[t]*(1-S[t]).
            total = lam * (beta * (1.0 - S[:, :, t]) - beta * u_t * sg)
            if grad_spikes is not None:
                total = total + grad_spikes[:, :, t] * sg
            if grad_u_readout is not None:
                total = total + grad_u_readout[:, :, t]
        grad_I[:, :, t] = total
        lam = total
    return grad_I
