"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set ``ALIGNREFINE_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("ALIGNREFINE_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass


def ctc_forward_backward(logp, labels, blank: int) -> tuple[float, np.ndarray]:
    """Log-likelihood of ``labels`` under per-frame ``logp`` and its gradient wrt ``logp``."""
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    ll, grad = _impl.ctc_forward_backward(logp, labels, int(blank))
    return float(ll), grad


def edit_ops(ref, hyp) -> tuple[int, int, int]:
    ref = np.ascontiguousarray(ref, dtype=np.int64)
    hyp = np.ascontiguousarray(hyp, dtype=np.int64)
    s, d, i = _impl.edit_ops(ref, hyp)
    return int(s), int(d), int(i)


__all__ = ["BACKEND", "ctc_forward_backward", "edit_ops"]
