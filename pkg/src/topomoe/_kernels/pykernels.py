"""Pure-numpy implementations of the hot kernels.

Same call signatures as the compiled module; selected automatically when
the extension is unavailable (or forced via TOPOMOE_PURE_PYTHON=1).
Convolutions go through a strided im2col view so the heavy lifting stays
inside BLAS.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

BACKEND = "python"


def _im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    n, c, t = x.shape
    t_out = (t - kernel) // stride + 1
    s0, s1, s2 = x.strides
    return as_strided(
        x,
        shape=(n, c, t_out, kernel),
        strides=(s0, s1, s2 * stride, s2),
        writeable=False,
    )


def conv1d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Valid (unpadded) 1-d convolution: (N,Cin,T) * (Cout,Cin,K) -> (N,Cout,To)."""
    cols = _im2col(x, w.shape[2], stride)
    return np.einsum("nctk,dck->ndt", cols, w, optimize=True)


def conv1d_grad_input(g: np.ndarray, w: np.ndarray, stride: int, t_in: int) -> np.ndarray:
    n, c_out, t_out = g.shape
    _, c_in, kernel = w.shape
    dx = np.zeros((n, c_in, t_in), dtype=g.dtype)
    span = (t_out - 1) * stride + 1
    for k in range(kernel):
        # each kernel tap scatters onto a strided slice of the input
        dx[:, :, k : k + span : stride] += np.einsum(
            "ndt,dc->nct", g, w[:, :, k], optimize=True
        )
    return dx


def conv1d_grad_weight(g: np.ndarray, x: np.ndarray, stride: int, kernel: int) -> np.ndarray:
    cols = _im2col(x, kernel, stride)
    return np.einsum("ndt,nctk->dck", g, cols, optimize=True)


def resample_sinc(x: np.ndarray, step: float, n_out: int, half_width: int) -> np.ndarray:
    """Windowed-sinc interpolation of x at positions n*step, n = 0..n_out-1.

    Taps outside the signal are treated as zero.  `half_width` taps are
    used on each side of the interpolation point, tapered by a Hann window.
    """
    t_in = x.shape[0]
    pos = np.arange(n_out, dtype=np.float64) * step
    base = np.floor(pos).astype(np.int64)
    offsets = np.arange(-half_width + 1, half_width + 1, dtype=np.int64)
    idx = base[:, None] + offsets[None, :]
    frac = pos[:, None] - idx.astype(np.float64)
    window = 0.5 * (1.0 + np.cos(np.pi * frac / half_width))
    window[np.abs(frac) >= half_width] = 0.0
    weights = np.sinc(frac) * window
    valid = (idx >= 0) & (idx < t_in)
    gathered = np.where(valid, x[np.clip(idx, 0, t_in - 1)], 0.0)
    out = np.sum(gathered * weights, axis=1)
    return out.astype(x.dtype, copy=False)
