"""Hot loops, compiled with numba unless ``HEAPRECALL_DISABLE_NUMBA`` is set."""

from .._accel import HAVE_NUMBA, backend
from . import pure

if HAVE_NUMBA:
    from . import jit as _impl
else:  # pragma: no cover - selected by env flag
    _impl = pure

subject_logliks = _impl.subject_logliks
subject_modes = _impl.subject_modes
impute = _impl.impute

__all__ = ["backend", "impute", "pure", "subject_logliks", "subject_modes"]
