"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``KGRERANK_PURE=1`` to force the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("KGRERANK_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

hinge_rank_batch = _impl.hinge_rank_batch
pl_nll_batch = _impl.pl_nll_batch
masked_greedy = _impl.masked_greedy
filtered_ranks = _impl.filtered_ranks

__all__ = [
    "BACKEND",
    "hinge_rank_batch",
    "pl_nll_batch",
    "masked_greedy",
    "filtered_ranks",
]
