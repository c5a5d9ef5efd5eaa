"""Numerical core with a compiled fast path.

The hot per-step kernels (advantage scans, action-mask construction, masked
softmax, categorical sampling) exist twice: a Cython extension
(``_speedups``) and a pure numpy fallback. The extension is used when it has
been built; set ``DDXPLAN_PURE_PYTHON=1`` to force the fallback. Matrix
products are delegated to BLAS through numpy in both backends, so the two
implementations differ only in per-step bookkeeping cost.

Backends agree to float tolerance (bitwise for integer/boolean kernels);
within one backend every kernel is deterministic.
"""

import os

from . import fallback as _fallback

if os.environ.get("DDXPLAN_PURE_PYTHON"):
    _impl = _fallback
else:
    try:
        from . import _speedups as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _fallback

BACKEND: str = _impl.BACKEND_NAME

gae_scan = _impl.gae_scan
masked_softmax_1d = _impl.masked_softmax_1d
categorical_sample = _impl.categorical_sample
action_mask = _impl.action_mask

__all__ = [
    "BACKEND",
    "gae_scan",
    "masked_softmax_1d",
    "categorical_sample",
    "action_mask",
]
