"""Hot-kernel backend selection.

The numba path is used when importable; set ELM_KERNELS=numpy to force the
pure-numpy fallback or ELM_KERNELS=numba to require the compiled path.
Hold the flag fixed for bit-reproducibility: both paths are deterministic,
but float64 rounding differs between them at the 1e-15 level.
"""

from __future__ import annotations

import os

_requested = os.environ.get("ELM_KERNELS", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise RuntimeError(
        f"ELM_KERNELS must be 'numba' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    from . import reference as _impl
else:
    try:
        from . import jit as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "numba":
            raise
        from . import reference as _impl  # type: ignore[no-redef]

BACKEND = _impl.BACKEND_NAME

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
layernorm_forward = _impl.layernorm_forward
layernorm_backward = _impl.layernorm_backward
adam_step = _impl.adam_step
embedding_backward = _impl.embedding_backward
encoder_layer_forward = _impl.encoder_layer_forward
encoder_layer_backward = _impl.encoder_layer_backward


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return BACKEND
