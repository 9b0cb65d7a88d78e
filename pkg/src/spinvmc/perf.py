"""Process-level performance knobs for the numpy-based evaluation engine.

The engine allocates many multi-megabyte temporaries per step; with glibc's
default mmap threshold every one of them is a fresh mmap that page-faults on
first touch, which dominates the runtime. Raising the threshold makes malloc
recycle the heap. Small GEMMs also run faster on a single BLAS thread; the
thread count is taken from SPINVMC_THREADS (default 1) and must be fixed
before numpy is first imported, hence :func:`set_blas_threads_from_env` is
called by the CLI before anything numerical loads.
"""

from __future__ import annotations

import ctypes
import os

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_applied = False

THREADS_ENV_VAR = "SPINVMC_THREADS"


def set_blas_threads_from_env() -> None:
    """Pin BLAS/OpenMP thread counts; call before importing numpy."""
    threads = os.environ.get(THREADS_ENV_VAR, "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)


def enable_heap_reuse() -> None:
    """Stop glibc from serving large numpy temporaries via fresh mmaps."""
    global _applied
    if _applied:
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    except OSError:  # non-glibc platform; harmless to skip
        pass
    _applied = True
