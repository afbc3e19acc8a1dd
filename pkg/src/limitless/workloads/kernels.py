"""Hot-loop kernels with a compiled core and a pure-Python fallback.

The compiled module is used when it was built and ``LF_PURE_PYTHON`` is not
set.  ``BACKEND`` names the implementation in use.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("LF_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

factor_block = _impl.factor_block
splitmix_int32 = _impl.splitmix_int32
matmul_row = _impl.matmul_row

__all__ = ["BACKEND", "factor_block", "splitmix_int32", "matmul_row"]
