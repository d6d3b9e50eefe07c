"""Dense-array primitives: causal 1D convolution with exact adjoints, stable
softmax, and seeded reproducible RNG streams.

All tensors are plain numpy arrays.  Time-series buffers are shaped
[batch, channels, time].  Computation happens in the dtype of the inputs:
float32 is the working precision, float64 is used by the gradient-checking
harness.  Convolution accumulates per output element in a fixed tap order, so
results do not depend on BLAS thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32


class NumericsError(RuntimeError):
    """A buffer entered a non-finite state (NaN or Inf)."""


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericsError(f"{name} contains {bad} non-finite values")


@dataclass
class SeededRng:
    """Reproducible random stream keyed by (seed, stream).

    Equal (seed, stream, call sequence) produce bit-identical outputs on all
    platforms; distinct stream ids give statistically independent streams for
    the same seed.
    """

    seed: int
    stream: int = 0
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def derive(self, stream: int) -> "SeededRng":
        """Fresh stream for the same seed, independent of this one's state."""
        return SeededRng(self.seed, stream)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def poisson(self, lam: float, size=None) -> np.ndarray:
        return self.gen.poisson(lam, size)


def _time_major(x: np.ndarray) -> np.ndarray:
    # [B, C, T] -> contiguous [C, T, B]; keeps per-tap time slices mergeable
    # into zero-copy 2D views for BLAS.
    return np.ascontiguousarray(x.transpose(1, 2, 0))


def conv1d_causal_forward(
    x: np.ndarray, kernels: np.ndarray, pad_right: bool = False
) -> np.ndarray:
    """Correlate kernels against the zero left-padded input.

    x: [B, C_in, T], kernels: [C_out, C_in, T_d].  Returns [B, C_out, T_out]
    with T_out = T, or T + T_d - 1 when pad_right is set.

    out[b,i,t] = sum_j sum_n kernels[i,j,n] * xpad[b,j,t+n] where xpad is x
    preceded by T_d - 1 zeros.  A kernel whose only nonzero tap sits at
    n = T_d - d - 1 therefore yields out[b,i,t] = sum_j w_ij * x[b,j,t-d]:
    tap position encodes the transmission delay d.
    """
    if x.ndim != 3 or kernels.ndim != 3:
        raise ValueError(f"expected 3-d input/kernels, got {x.shape} / {kernels.shape}")
    B, C_in, T = x.shape
    C_out, C_in_k, T_d = kernels.shape
    if C_in_k != C_in:
        raise ValueError(f"channel mismatch: input has {C_in}, kernels expect {C_in_k}")
    if T < 1 or T_d < 1:
        raise ValueError(f"need T >= 1 and T_d >= 1, got T={T}, T_d={T_d}")
    check_finite("conv input", x)
    check_finite("conv kernels", kernels)

    dtype = x.dtype
    T_out = T + T_d - 1 if pad_right else T
    xcol = _unfold_taps(x, T_d, T_out, dtype)
    K2 = kernels.reshape(C_out, C_in * T_d).astype(dtype, copy=False)
    out = K2 @ xcol
    return out.reshape(C_out, T_out, B).transpose(2, 0, 1)


def _stack_windows(xp: np.ndarray, T_out: int) -> np.ndarray:
    """All length-T_out windows of xp [C, L, B] as rows: [(c, n), (u, b)].

    result[(c, n), (u, b)] = xp[c, n + u, b].  One contiguous copy here turns
    the whole multi-tap convolution into a single GEMM, which is much faster
    than per-tap products on one core.
    """
    C = xp.shape[0]
    B = xp.shape[2]
    win = np.lib.stride_tricks.sliding_window_view(xp, T_out, axis=1)
    # win[c, n, b, u] -> rows (c, n), columns (u, b)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(-1, T_out * B)


def _unfold_taps(x: np.ndarray, T_d: int, T_out: int, dtype) -> np.ndarray:
    """Left-pad x by T_d - 1 zeros (plus right pad when T_out > T) and stack
    the T_d shifted copies: result[(j, n), (u, b)] = xpad[j, n + u, b]."""
    B, C_in, T = x.shape
    xp = np.zeros((C_in, T_out + T_d - 1, B), dtype)
    xp[:, T_d - 1 : T_d - 1 + T, :] = x.transpose(1, 2, 0)
    return _stack_windows(xp, T_out)


def conv1d_causal_backward(
    x: np.ndarray,
    kernels: np.ndarray,
    grad_output: np.ndarray,
    pad_right: bool = False,
    need_grad_input: bool = True,
) -> tuple[np.ndarray | None, np.ndarray]:
    """Exact adjoint of conv1d_causal_forward.

    Returns (grad_input [B, C_in, T] or None, grad_kernels [C_out, C_in, T_d]).
    need_grad_input=False skips the input adjoint (first-layer optimization).
    """
    B, C_in, T = x.shape
    C_out, C_in_k, T_d = kernels.shape
    if C_in_k != C_in:
        raise ValueError(f"channel mismatch: input has {C_in}, kernels expect {C_in_k}")
    T_out = T + T_d - 1 if pad_right else T
    if grad_output.shape != (B, C_out, T_out):
        raise ValueError(
            f"grad_output shape {grad_output.shape} != {(B, C_out, T_out)}"
        )

    dtype = x.dtype
    xcol = _unfold_taps(x, T_d, T_out, dtype)
    g2 = _time_major(grad_output.astype(dtype, copy=False)).reshape(C_out, T_out * B)
    grad_kernels = (g2 @ xcol.T).reshape(C_out, C_in, T_d)

    grad_input = None
    if need_grad_input:
        # x[u] meets grad_output at index u + (T_d-1) - n, so the input adjoint
        # is the same unfold applied to the right-padded grads against the
        # tap-reversed kernels.
        gp = np.zeros((C_out, T + T_d - 1, B), dtype)
        gp[:, :T_out, :] = grad_output.transpose(1, 2, 0)
        gcol = _stack_windows(gp, T)  # gcol[(i, k), (u, b)] = gp[i, u + k, b]
        Krev = np.ascontiguousarray(kernels[:, :, ::-1].transpose(1, 0, 2)).reshape(
            C_in, C_out * T_d
        )
        gx = Krev @ gcol
        grad_input = gx.reshape(C_in, T, B).transpose(2, 0, 1)
    return grad_input, grad_kernels


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    """Numerically stabilized softmax over the last axis."""
    check_finite("softmax input", x)
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_lastdim_backward(y: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    """Adjoint of softmax_lastdim given its output y."""
    inner = np.sum(grad_y * y, axis=-1, keepdims=True)
    return y * (grad_y - inner)
