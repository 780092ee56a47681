"""Segment-reduction kernels with a compiled core and a numpy fallback.

The compiled extension is preferred when importable; set the environment
variable ``TOPTD_KERNELS`` to ``numpy`` or ``compiled`` to force a backend.
Callers access kernels through this module's attributes (``kernels.seg_sum``
etc.) so :func:`set_backend` takes effect everywhere.
"""

import os

from . import _numpy

_FUNCTIONS = (
    "seg_sum",
    "seg_max",
    "seg_logsumexp",
    "seg_softmax",
    "seg_expect_smooth",
    "dense_logsumexp",
    "dense_softmax",
    "dense_expect_smooth",
    "restricted_backup_opt",
    "restricted_backup_eval",
    "dense_backup_opt",
    "dense_backup_eval",
)

try:
    from . import _compiled
except ImportError:
    _compiled = None

_BACKENDS = {"numpy": _numpy}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_active = None


def available_backends():
    return tuple(sorted(_BACKENDS))


def active_backend():
    return _active


def set_backend(name):
    """Bind all kernel functions to the named backend."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    impl = _BACKENDS[name]
    for fn in _FUNCTIONS:
        globals()[fn] = getattr(impl, fn)
    _active = name


def _default_backend():
    requested = os.environ.get("TOPTD_KERNELS", "auto")
    if requested == "auto":
        return "compiled" if _compiled is not None else "numpy"
    if requested not in _BACKENDS:
        raise ImportError(
            f"TOPTD_KERNELS={requested!r} but that backend is unavailable "
            f"(available: {available_backends()})"
        )
    return requested


set_backend(_default_backend())
