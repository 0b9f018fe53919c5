"""Hot kernels with a compiled core and a pure-Python fallback.

The Cython extension ``_ckernels`` is used when it was built and importable;
otherwise (or when ``BDECF_PURE_PYTHON=1``) the numpy/scipy versions in
``_pykernels`` are selected. ``BACKEND`` names the active implementation.

Integer arrays passed to the kernels must be ``int64`` and contiguous; float
arrays must be C-contiguous and share one dtype (float32 or float64).
"""

import os

from . import _pykernels as py

if os.environ.get("BDECF_PURE_PYTHON", "") not in ("", "0"):
    _impl = py
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = py
        BACKEND = "python"

sparse_rows_matmul = _impl.sparse_rows_matmul
sparse_rows_matmul_grad = _impl.sparse_rows_matmul_grad
attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward
target_ranks = _impl.target_ranks


def compiled():
    """Return the compiled module, or ``None`` when it is not available."""
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


__all__ = [
    "BACKEND",
    "attention_backward",
    "attention_forward",
    "compiled",
    "py",
    "sparse_rows_matmul",
    "sparse_rows_matmul_grad",
    "target_ranks",
]
