"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback.  ``SBNN_BACKEND=python`` (or ``cython``) forces a choice.
"""
from __future__ import annotations

import importlib
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_MODULES = {"python": _pykernels}
if _ckernels is not None:
    _MODULES["cython"] = _ckernels


def available_backends() -> list[str]:
    return sorted(_MODULES)


def get_backend(name=None):
    """Kernel module for ``name`` ("auto", "cython", "python"); modules pass through."""
    if name is not None and not isinstance(name, str):
        return name
    name = name or os.environ.get("SBNN_BACKEND", "auto")
    if name == "auto":
        return _MODULES.get("cython", _pykernels)
    if name not in _MODULES:
        raise ValueError(f"kernel backend {name!r} is not available (have {available_backends()})")
    return _MODULES[name]


def backend_name(mod=None) -> str:
    mod = mod or get_backend()
    return "cython" if mod is _ckernels and mod is not None else "python"


def reload_extension():
    """Re-import the compiled extension after an in-place build."""
    global _ckernels
    try:
        _ckernels = importlib.import_module(f"{__package__}._ckernels")
        _MODULES["cython"] = _ckernels
    except ImportError:
        pass
    return _ckernels
