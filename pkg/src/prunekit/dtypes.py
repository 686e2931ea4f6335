"""Global floating-point precision mode.

Training defaults to 32-bit. Gradient-check suites switch the process to
64-bit because central finite differences are unreliable in float32.
"""

from contextlib import contextmanager

import numpy as np

from .errors import ContractError

_DTYPES = {32: np.float32, 64: np.float64}
_current_bits = 32


def set_precision(bits: int) -> None:
    global _current_bits
    if bits not in _DTYPES:
        raise ContractError(f"precision must be 32 or 64, got {bits}")
    _current_bits = bits


def precision_bits() -> int:
    return _current_bits


def default_dtype():
    return _DTYPES[_current_bits]


@contextmanager
def precision(bits: int):
    """Temporarily switch the default dtype (used by gradient checks)."""
    prev = _current_bits
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(prev)
