"""Backend selection for the hot kernels.

Set ``VMQ_NUMBA=0`` to force the pure-numpy fallback path. ``VMQ_THREADS``
caps the thread count handed to numba and to the BLAS pools.
"""

import os
import warnings

_FALSY = {"0", "false", "no", "off"}

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("VMQ_NUMBA", "1").strip().lower() not in _FALSY


def njit(fn):
    """Compile ``fn`` with numba when available, regardless of ``USE_NUMBA``.

    The dispatch between the compiled loop and the numpy fallback happens in
    :mod:`vmq.kernels`; compiling unconditionally keeps the loop variants
    available to the kernel benchmark.
    """
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def thread_limit():
    raw = os.environ.get("VMQ_THREADS")
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError(f"VMQ_THREADS must be >= 1, got {raw!r}")
    return n


def apply_thread_limit():
    """Apply ``VMQ_THREADS`` to numba and BLAS. Returns the applied limit."""
    n = thread_limit()
    if n is None:
        return None
    if HAS_NUMBA:
        with warnings.catch_warnings():
            # threading-layer probe warns about an old TBB; the fallback is fine
            warnings.simplefilter("ignore", numba.NumbaWarning)
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:
        pass
    return n


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
