"""Kernel selection: compiled Cython kernels when importable, numpy otherwise.

Set ``FEDLDI_BACKEND=python`` to force the fallback.
"""

import os

from . import _fallback

NAME = "python"
lstm_seq_forward = _fallback.lstm_seq_forward
lstm_seq_backward = _fallback.lstm_seq_backward
mlp_sgd_epoch = _fallback.mlp_sgd_epoch

if os.environ.get("FEDLDI_BACKEND", "").lower() not in ("python", "numpy", "fallback"):
    try:
        from . import _kernels
    except ImportError:
        _kernels = None
    if _kernels is not None:
        NAME = "cython"
        lstm_seq_forward = _kernels.lstm_seq_forward
        lstm_seq_backward = _kernels.lstm_seq_backward
        mlp_sgd_epoch = _kernels.mlp_sgd_epoch


def available():
    """Names of the backends that can be loaded in this environment."""
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401
        names.append("cython")
    except ImportError:
        pass
    return names


def get(name):
    """Module-like namespace for a named backend (``python`` or ``cython``)."""
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
