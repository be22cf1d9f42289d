"""Kernel backend selection.

QCNN_BACKEND=numba (default) uses the compiled kernels; QCNN_BACKEND=numpy
forces the pure-numpy path. With no flag set, a broken numba install falls
back to numpy silently.
"""

import os

from .errors import ConfigurationError

_requested = os.environ.get("QCNN_BACKEND", "").strip().lower()

if _requested in ("", "numba"):
    try:
        from . import kernels_numba as kernels
    except ImportError:
        if _requested == "numba":
            raise
        from . import kernels_numpy as kernels
elif _requested == "numpy":
    from . import kernels_numpy as kernels
else:
    raise ConfigurationError(
        f"QCNN_BACKEND={_requested!r} not recognized; use 'numba' or 'numpy'"
    )

BACKEND = kernels.NAME
