"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when importable; otherwise the
numpy fallback in ``_pykernels`` is. Setting ``LEANTTA_BACKEND=python`` forces
the fallback.
"""

import logging
import os

from leantta import _pykernels

log = logging.getLogger(__name__)

BACKENDS = {"python": _pykernels}

try:
    from leantta import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["cython"] = _ckernels


def _select():
    wanted = os.environ.get("LEANTTA_BACKEND", "").strip().lower()
    if wanted:
        if wanted not in BACKENDS:
            log.warning("backend %r unavailable, using fallback", wanted)
            return "python"
        return wanted
    return "cython" if "cython" in BACKENDS else "python"


NAME = _select()
kernels = BACKENDS[NAME]


def use(name):
    """Switch the active kernel backend for this process."""
    global NAME, kernels
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {sorted(BACKENDS)}")
    NAME = name
    kernels = BACKENDS[name]
