"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set ``PRUNELAB_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
jacobi_rotate = _fallback.jacobi_rotate
bpe_train = _fallback.bpe_train

if not os.environ.get("PRUNELAB_PURE_PYTHON"):
    try:
        from . import _kernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        jacobi_rotate = _kernels.jacobi_rotate
        bpe_train = _kernels.bpe_train
