"""Kernel backend selection.

The block-grid kernels exist twice: a compiled Cython extension
(``sdcount._kernels``) and a pure-numpy fallback (``sdcount._kernels_py``).
The compiled one is picked at import when available; set
``SDCOUNT_PURE_PYTHON=1`` to force the fallback. ``sdcount.backend.kernels``
is the module actually in use and ``BACKEND`` its name.
"""

import os

from sdcount import _kernels_py


def _select():
    if os.environ.get("SDCOUNT_PURE_PYTHON", "") not in ("", "0"):
        return _kernels_py
    try:
        from sdcount import _kernels
    except ImportError:
        return _kernels_py
    return _kernels


kernels = _select()
BACKEND = kernels.BACKEND_NAME
