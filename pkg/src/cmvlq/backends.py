"""Selection between the compiled simulation kernel and the numpy fallback.

The compiled kernel and the fallback execute the same floating-point
operations in the same order (the extension is built with FMA contraction
disabled), so the choice never changes results, only speed.  Set
CMVLQ_BACKEND=python or =cython to force one side; the default picks the
kernel when the extension imported cleanly.
"""

from __future__ import annotations

import os

try:
    from . import _kernels as _ext
except ImportError:
    _ext = None

HAVE_KERNELS = _ext is not None


def kernels():
    if _ext is None:
        raise RuntimeError("compiled kernel requested but cmvlq._kernels is not built")
    return _ext


def resolve():
    """Backend for the current call: 'cython' or 'python'."""
    choice = os.environ.get("CMVLQ_BACKEND", "auto").lower()
    if choice == "auto":
        return "cython" if HAVE_KERNELS else "python"
    if choice == "python":
        return "python"
    if choice == "cython":
        kernels()
        return "cython"
    raise ValueError(f"CMVLQ_BACKEND must be auto, python or cython (got {choice!r})")
