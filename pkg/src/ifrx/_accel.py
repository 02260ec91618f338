"""Backend selection for the hot kernels.

``IFRX_DISABLE_NUMBA=1`` forces the pure-numpy path; ``IFRX_BACKEND`` may name
``numba`` or ``numpy`` explicitly. ``IFRX_THREADS`` caps worker threads for
numba and BLAS.
"""

from __future__ import annotations

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


def backend_name() -> str:
    requested = os.environ.get("IFRX_BACKEND", "").strip().lower()
    if requested not in {"", "numba", "numpy"}:
        raise ValueError(f"IFRX_BACKEND must be 'numba' or 'numpy', got {requested!r}")
    if _env_flag("IFRX_DISABLE_NUMBA") or requested == "numpy" or not HAVE_NUMBA:
        return "numpy"
    return "numba"


def thread_cap() -> int | None:
    raw = os.environ.get("IFRX_THREADS")
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError("IFRX_THREADS must be >= 1")
    return n


def configure_threads() -> None:
    """Apply ``IFRX_THREADS`` to numba and the BLAS pool, if set."""
    n = thread_cap()
    if n is None:
        return
    if HAVE_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity decorator otherwise."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)

    def wrap(fn):
        return fn

    if args and callable(args[0]):
        return args[0]
    return wrap
