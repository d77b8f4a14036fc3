"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``SPISR_BACKEND=python`` to force the fallback.
"""

import logging
import os

from . import _fallback

logger = logging.getLogger(__name__)

_compiled = None
if os.environ.get("SPISR_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using numpy fallback")

kernels = _compiled if _compiled is not None else _fallback
BACKEND = "compiled" if _compiled is not None else "python"


def get(name):
    """Return the kernel module for ``name`` in {"compiled", "python"}."""
    if name == "python":
        return _fallback
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")
