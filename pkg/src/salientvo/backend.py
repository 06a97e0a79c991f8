"""Kernel backend selection.

Hot inner loops (salient scoring, correlation volumes, bilinear gathers,
superpixel assignment) exist twice: as numba ``@njit`` kernels and as
vectorized pure-numpy fallbacks. The environment variable ``SVO_BACKEND``
picks one explicitly (``numba`` or ``numpy``); unset, numba is used when
importable. ``SVO_THREADS`` caps numba worker threads (0 = auto).
"""

import os

from .errors import ConfigError


def _resolve_backend() -> str:
    choice = os.environ.get("SVO_BACKEND", "").strip().lower()
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        import numba  # noqa: F401  -- fail loudly if forced but missing

        return "numba"
    if choice not in ("", "auto"):
        raise ConfigError(f"SVO_BACKEND must be 'numba' or 'numpy', got {choice!r}")
    try:
        import numba  # noqa: F401

        return "numba"
    except ImportError:
        return "numpy"


BACKEND = _resolve_backend()
USE_NUMBA = BACKEND == "numba"


def apply_thread_cap() -> None:
    """Apply SVO_THREADS to the numba threading layer (no-op on numpy)."""
    if not USE_NUMBA:
        return
    raw = os.environ.get("SVO_THREADS", "0").strip()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SVO_THREADS must be an integer, got {raw!r}")
    if n > 0:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


apply_thread_cap()
