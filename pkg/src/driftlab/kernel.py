"""Backend selection for the simulation kernels.

The compiled extension (driftlab._ckern) is used when it imported cleanly;
otherwise the pure-Python twin takes over.  Set DRIFTLAB_BACKEND=python to
force the fallback (useful for the parity tests and the benchmark).  Both
backends are bit-identical by contract; tests/test_kernel_parity.py enforces
this.
"""
from __future__ import annotations

import os

from . import _pykern

try:
    from . import _ckern
except ImportError:  # extension not built; pure Python still works
    _ckern = None

NO_FRONT = _pykern.NO_FRONT
CapacityError = _pykern.CapacityError
TrackedWalks = _pykern.TrackedWalks
window_geometry = _pykern.window_geometry
flatten = _pykern.flatten
unflatten = _pykern.unflatten


def _select():
    forced = os.environ.get("DRIFTLAB_BACKEND", "").strip().lower()
    if forced == "python":
        return _pykern
    if forced == "c":
        if _ckern is None:
            raise ImportError("DRIFTLAB_BACKEND=c but driftlab._ckern is not built")
        return _ckern
    return _ckern if _ckern is not None else _pykern


_active = _select()
BACKEND_NAME = _active.BACKEND_NAME


def backend(name: str | None = None):
    """Return a kernel module: the active one, or explicitly 'c' / 'python'."""
    if name is None:
        return _active
    if name == "python":
        return _pykern
    if name == "c":
        if _ckern is None:
            raise ImportError("compiled kernel not available")
        return _ckern
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    names = ["python"]
    if _ckern is not None:
        names.insert(0, "c")
    return names


def fast_run(*args, **kwargs):
    return _active.fast_run(*args, **kwargs)


def sprinkled_run(*args, **kwargs):
    return _active.sprinkled_run(*args, **kwargs)
