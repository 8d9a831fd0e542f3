"""Backend selection for the hot kernels.

The compiled core (``_ckernels``) is used when it was built; otherwise the
numpy fallback is imported. Set ``TUMORSCOPE_BACKEND=python`` to force the
fallback. Both backends return bit-identical results.
"""

import os

from tumorscope import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("TUMORSCOPE_BACKEND", "").lower() != "python":
    try:
        from tumorscope import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass


def compiled_available() -> bool:
    try:
        from tumorscope import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


im2col = _impl.im2col
col2im = _impl.col2im
pool_forward = _impl.pool_forward
pool_backward = _impl.pool_backward
segment_graph = _impl.segment_graph
roi_max_pool = _impl.roi_max_pool
