"""Kernel backend selection.

``FCDISTILL_BACKEND`` may be ``compiled``, ``python`` or ``auto`` (default).
``auto`` uses the Cython extension when it imports and falls back silently.
"""

import logging
import os

from fcdistill import _pykernels

logger = logging.getLogger(__name__)

try:
    from fcdistill import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _select():
    choice = os.environ.get("FCDISTILL_BACKEND", "auto").lower()
    if choice == "python":
        return _pykernels
    if choice == "compiled":
        if _ckernels is None:
            raise ImportError("FCDISTILL_BACKEND=compiled but fcdistill._ckernels is not built")
        return _ckernels
    if choice != "auto":
        raise ValueError(f"unknown FCDISTILL_BACKEND {choice!r}")
    if _ckernels is None:
        logger.info("compiled kernels unavailable, using pure-Python fallback")
        return _pykernels
    return _ckernels


kernels = _select()
python_kernels = _pykernels
compiled_kernels = _ckernels


def available():
    """Names of the importable kernel backends."""
    return [k.NAME for k in (_ckernels, _pykernels) if k is not None]
