"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the NumPy
fallback is imported. ``KRFLOW_KERNELS=python`` forces the fallback.
"""
import os

BACKEND = "python"
if os.environ.get("KRFLOW_KERNELS", "").lower() != "python":
    try:
        from ._kernels import centred_matvec, pairwise_sum, row_scaled_sum, sym2_inverse  # noqa: F401

        BACKEND = "cython"
    except ImportError:
        pass
if BACKEND == "python":
    from ._kernels_py import centred_matvec, pairwise_sum, row_scaled_sum, sym2_inverse  # noqa: F401

from . import _kernels_py as python_kernels  # noqa: E402,F401


def compiled_kernels():
    """The compiled module, or None if it is not built."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels
