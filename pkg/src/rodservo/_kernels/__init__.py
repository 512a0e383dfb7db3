"""Hot loops, compiled when the extension is built and numpy otherwise.

Set ``RODSERVO_PURE_PYTHON=1`` before import to force the numpy versions.
"""
import os

from . import _fallback

BACKEND = "python"
_compiled = None
if os.environ.get("RODSERVO_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _som_core as _compiled
        BACKEND = "cython"
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _fallback
som_train = _impl.som_train
greedy_order = _impl.greedy_order


def backends():
    """Available implementations by name, for benchmarks and parity tests."""
    out = {"python": _fallback}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
