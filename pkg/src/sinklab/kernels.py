"""Backend selection for the attention kernels.

The compiled extension is used when it imports; otherwise the numpy version.
``SINKLAB_KERNELS=python`` forces the fallback, ``SINKLAB_KERNELS=cython``
makes a missing extension an error. Results agree across backends to
rounding, and are bit-reproducible within one backend.
"""

import os

from . import _pykernels

BACKEND = "python"
_choice = os.environ.get("SINKLAB_KERNELS", "auto").lower()

if _choice != "python":
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise
        _impl = _pykernels
else:
    _impl = _pykernels

attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward

__all__ = ["BACKEND", "attention_forward", "attention_backward"]
