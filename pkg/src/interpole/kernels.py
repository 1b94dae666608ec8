"""Backend selection for the hot numeric kernels.

``INTERPOLE_BACKEND=numpy`` forces the pure-numpy path; the default is numba
when it imports, numpy otherwise.  Both backends expose the same functions:
``forward``, ``backward``, ``posteriors``, ``action_loglik``, ``q_obs`` and
``grad``.
"""
import logging
import os

from . import _kernels_numpy

log = logging.getLogger(__name__)

_BACKENDS = {"numpy": _kernels_numpy}


def _load_numba():
    if "numba" not in _BACKENDS:
        from . import _kernels_numba
        _BACKENDS["numba"] = _kernels_numba
    return _BACKENDS["numba"]


def get(name=None):
    """Return the kernel module for ``name`` (or the configured default)."""
    if name is not None and not isinstance(name, str):
        return name
    name = (name or os.environ.get("INTERPOLE_BACKEND", "numba")).lower()
    if name == "numpy":
        return _kernels_numpy
    if name != "numba":
        raise ValueError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")
    try:
        return _load_numba()
    except ImportError:  # pragma: no cover - numba is a declared dependency
        log.warning("numba unavailable, falling back to numpy kernels")
        return _kernels_numpy


def set_workers(n):
    """Cap the numba thread pool; results do not depend on the count."""
    if not n:
        return
    try:
        import numba
    except ImportError:  # pragma: no cover
        return
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
