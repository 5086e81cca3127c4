"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
reference is used. Set ``JOINTFACE_BACKEND=python`` to force the fallback.
"""

import os

from . import _pykernels

BACKENDS = {"python": _pykernels}

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["cython"] = _ckernels


def _select():
    wanted = os.environ.get("JOINTFACE_BACKEND", "").strip().lower()
    if wanted:
        if wanted not in BACKENDS:
            raise ImportError(f"JOINTFACE_BACKEND={wanted!r} is not available; have {sorted(BACKENDS)}")
        return wanted
    return "cython" if "cython" in BACKENDS else "python"


BACKEND = _select()
_impl = BACKENDS[BACKEND]

maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
roi_pool_forward = _impl.roi_pool_forward
roi_pool_backward = _impl.roi_pool_backward
nms = _impl.nms
