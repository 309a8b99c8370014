"""Hot-kernel backend selection.

The measured split (see benchmarks/bench_kernels.py): the strided im2col
convolutions ride numpy's BLAS and beat the compiled scalar loops, while
the windowed-sinc resampler is ~3x faster compiled.  The default therefore
mixes the two; the compiled convolutions stay available for parity tests
and for environments without a tuned BLAS.

Set TOPOMOE_PURE_PYTHON=1 to force the numpy implementations everywhere,
or TOPOMOE_FORCE_COMPILED=1 to force the compiled ones.
"""

import os

from . import pykernels

try:
    from . import cykernels as _compiled  # type: ignore[attr-defined]
except ImportError:
    _compiled = None

if os.environ.get("TOPOMOE_PURE_PYTHON") == "1" or _compiled is None:
    BACKEND = "python"
    _conv_impl = pykernels
    _resample_impl = pykernels
elif os.environ.get("TOPOMOE_FORCE_COMPILED") == "1":
    BACKEND = "compiled"
    _conv_impl = _compiled
    _resample_impl = _compiled
else:
    BACKEND = "mixed"
    _conv_impl = pykernels
    _resample_impl = _compiled

conv1d_forward = _conv_impl.conv1d_forward
conv1d_grad_input = _conv_impl.conv1d_grad_input
conv1d_grad_weight = _conv_impl.conv1d_grad_weight
resample_sinc = _resample_impl.resample_sinc

__all__ = [
    "BACKEND",
    "conv1d_forward",
    "conv1d_grad_input",
    "conv1d_grad_weight",
    "resample_sinc",
    "pykernels",
]
