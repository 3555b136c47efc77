"""Backend selection for the hot loops.

The Cython extension is used when it has been built; otherwise, or when the
environment variable ``PERFMAP_PURE_PYTHON`` is set to a non-empty value
other than ``0``, the numpy implementations are used.
"""
import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("PERFMAP_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

osvd_select = _impl.osvd_select
oscillation_index_rows = _impl.oscillation_index_rows


def available_backends() -> dict:
    """Map backend name to module, for tests and benchmarks."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
