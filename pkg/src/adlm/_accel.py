"""Backend selection for the hot kernels.

Numba is used when it is importable and ``ADLM_DISABLE_NUMBA`` is unset (or
set to ``0``). Setting ``ADLM_DISABLE_NUMBA=1`` forces the pure-numpy path,
which is what the benchmark compares against.
"""
import os

_FALSY = ("", "0", "false", "no", "off")


def _numba_requested():
    return os.environ.get("ADLM_DISABLE_NUMBA", "").strip().lower() in _FALSY


try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _numba_requested()


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, identity decorator otherwise.

    Decorated functions stay importable without numba; they are only called
    when ``USE_NUMBA`` is true.
    """
    if not HAS_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
