"""Kernel backend selection.

The compiled module is used when it imports; otherwise the numpy fallback.
Set ``QUIK_BACKEND=numpy`` to force the fallback.
"""
import contextlib
import logging
import os

from . import _fallback

logger = logging.getLogger(__name__)

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"numpy": _fallback}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled


def available():
    return sorted(_BACKENDS)


def _initial():
    wanted = os.environ.get("QUIK_BACKEND", "").strip().lower()
    if wanted:
        if wanted not in _BACKENDS:
            logger.warning("QUIK_BACKEND=%s unavailable, using %s", wanted, _default_name())
            return _BACKENDS[_default_name()]
        return _BACKENDS[wanted]
    return _BACKENDS[_default_name()]


def _default_name():
    return "cython" if "cython" in _BACKENDS else "numpy"


_active = _initial()


def get():
    return _active


def get_backend(name):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; available: {available()}") from None


def set_backend(name):
    global _active
    _active = get_backend(name)


@contextlib.contextmanager
def use_backend(name):
    global _active
    prev = _active
    _active = get_backend(name)
    try:
        yield _active
    finally:
        _active = prev
