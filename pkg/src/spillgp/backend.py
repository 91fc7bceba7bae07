"""Selects the filter/smoother core: compiled extension or pure NumPy.

The compiled core (`spillgp._filter_cy`) removes the per-step Python
overhead that dominates for small state dimensions.  Both cores implement
the same array-level contract and are interchangeable; the active one is
chosen at import, with the SPILLGP_BACKEND environment variable
("compiled" | "python" | "auto") or `use_backend()` as overrides.
"""

from __future__ import annotations

import os

from . import _filter_py

try:
    from . import _filter_cy

    HAVE_COMPILED = True
except ImportError:  # pragma: no cover - build-environment dependent
    _filter_cy = None
    HAVE_COMPILED = False

_BACKENDS = {"python": _filter_py}
if HAVE_COMPILED:
    _BACKENDS["compiled"] = _filter_cy

_active_name = None
_active = None


def use_backend(name: str) -> str:
    """Select the core by name; "auto" prefers the compiled extension."""
    global _active_name, _active
    if name == "auto":
        name = "compiled" if HAVE_COMPILED else "python"
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(_BACKENDS)}")
    _active_name = name
    _active = _BACKENDS[name]
    return name


def active_backend() -> str:
    return _active_name


def filter_pass(*args):
    return _active.filter_pass(*args)


def smoother_pass(*args):
    return _active.smoother_pass(*args)


CorruptSites = _filter_py.CorruptSites

use_backend(os.environ.get("SPILLGP_BACKEND", "auto"))
