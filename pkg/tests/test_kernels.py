"""Backend parity: the compiled kernels and the numpy fallbacks must agree."""

import numpy as np
import pytest

from topomoe._kernels import BACKEND, pykernels

try:
    from topomoe._kernels import cykernels
except ImportError:
    cykernels = None

needs_compiled = pytest.mark.skipif(cykernels is None,
                                    reason="compiled kernels not built")


def test_backend_selected():
    assert BACKEND in ("mixed", "compiled", "python")


@needs_compiled
@pytest.mark.parametrize("dtype,atol", [(np.float32, 1e-4), (np.float64, 1e-10)])
@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv_forward_parity(rng, dtype, atol, stride):
    x = np.ascontiguousarray(rng.normal(size=(4, 3, 41)).astype(dtype))
    w = np.ascontiguousarray(rng.normal(size=(5, 3, 7)).astype(dtype))
    a = cykernels.conv1d_forward(x, w, stride)
    b = pykernels.conv1d_forward(x, w, stride)
    np.testing.assert_allclose(a, b, atol=atol)


@needs_compiled
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_parity(rng, stride):
    x = np.ascontiguousarray(rng.normal(size=(3, 2, 33)))
    w = np.ascontiguousarray(rng.normal(size=(4, 2, 5)))
    t_out = (33 - 5) // stride + 1
    g = np.ascontiguousarray(rng.normal(size=(3, 4, t_out)))
    np.testing.assert_allclose(cykernels.conv1d_grad_input(g, w, stride, 33),
                               pykernels.conv1d_grad_input(g, w, stride, 33),
                               atol=1e-10)
    np.testing.assert_allclose(cykernels.conv1d_grad_weight(g, x, stride, 5),
                               pykernels.conv1d_grad_weight(g, x, stride, 5),
                               atol=1e-10)


@needs_compiled
def test_resample_parity(rng):
    x = np.ascontiguousarray(rng.normal(size=777))
    for step in (1.28, 2.56, 5.0):
        n_out = int(np.floor(777 / step))
        a = cykernels.resample_sinc(x, step, n_out, 16)
        b = pykernels.resample_sinc(x, step, n_out, 16)
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_python_conv_matches_direct_loop(rng):
    """The numpy path itself against a literal triple loop."""
    x = rng.normal(size=(2, 2, 15))
    w = rng.normal(size=(3, 2, 4))
    got = pykernels.conv1d_forward(x, w, 2)
    t_out = (15 - 4) // 2 + 1
    want = np.zeros((2, 3, t_out))
    for n in range(2):
        for d in range(3):
            for o in range(t_out):
                for c in range(2):
                    for k in range(4):
                        want[n, d, o] += x[n, c, o * 2 + k] * w[d, c, k]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_resample_interpolates_bandlimited_signal(rng):
    """Windowed sinc on an in-band tone reproduces the true waveform."""
    t = np.arange(2000)
    x = np.sin(2 * np.pi * 0.02 * t)
    step = 1.7
    n_out = int(np.floor(2000 / step))
    out = pykernels.resample_sinc(x, step, n_out, 16)
    expected = np.sin(2 * np.pi * 0.02 * (np.arange(n_out) * step))
    core = slice(32, -32)
    assert np.abs(out[core] - expected[core]).max() < 1e-3
