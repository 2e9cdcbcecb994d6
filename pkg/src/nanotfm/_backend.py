"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy twins in ``_fallback`` take over. Set ``NANOTFM_PURE_PYTHON=1`` to force
the fallback at import time, or call :func:`use` at runtime.
"""
import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _fallback}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

if os.environ.get("NANOTFM_PURE_PYTHON") or _ckernels is None:
    K = _fallback
    name = "python"
else:
    K = _ckernels
    name = "compiled"


def available():
    return sorted(_BACKENDS)


def use(backend):
    """Switch the active kernel backend ("compiled" or "python")."""
    global K, name
    if backend not in _BACKENDS:
        raise ValueError(f"backend {backend!r} unavailable; have {available()}")
    K = _BACKENDS[backend]
    name = backend
    log.debug("kernel backend -> %s", backend)


def current():
    return name
