"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``ARCVQ_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("ARCVQ_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

scatter_add_rows = _impl.scatter_add_rows
topk_columns = _impl.topk_columns
arc_columns = _impl.arc_columns
