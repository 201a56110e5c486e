"""Backend selection for the hot loops.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy twins in ``_pykernels`` take over.  Set ``FINPRINT_BACKEND=python`` to
force the fallback (``cython`` makes a missing extension an import error).
"""
import os

from . import _pykernels

_choice = os.environ.get("FINPRINT_BACKEND", "auto").lower()

if _choice == "python":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _choice == "cython":
            raise
        _impl = _pykernels

BACKEND = _impl.BACKEND
im2col = _impl.im2col
col2im = _impl.col2im
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
box_distance_matrix = _impl.box_distance_matrix
dbscan_labels = _impl.dbscan_labels


def backends():
    """Map of every importable backend name to its module."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        found["cython"] = _ckernels
    return found
