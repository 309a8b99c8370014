"""topomoe: topology-aware mixture-of-experts transformer for EEG.

Three parallel per-electrode encoders (waveform, band power, linear
reference), bidirectional time/frequency cross-attention fusion,
hierarchical electrode-position embeddings, a rotary-attention MoE
backbone, and dual-domain masked-reconstruction pre-training, plus the
signal preprocessing, evaluation metrics, and CLI around them.
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
