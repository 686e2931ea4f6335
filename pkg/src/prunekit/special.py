"""Scalar error function and its inverse.

erf(x) = (2/sqrt(pi)) * integral_0^x exp(-t^2) dt, taken from the C math
library (absolute error well below 1e-12). The inverse has no stdlib
counterpart: we seed it with a rational approximation of the standard
normal quantile and polish with two Newton steps on erf itself, which
leaves the round-trip erf(erf_inv(s)) == s exact to double precision.
"""

import math

from .errors import ContractError

_SQRT2 = math.sqrt(2.0)
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)

# Rational approximation of the inverse normal CDF (Acklam's coefficients,
# relative error < 1.2e-9 before refinement).
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def erf_scalar(x: float) -> float:
    """Error function of a real scalar."""
    return math.erf(x)


def _normal_quantile(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        raise ContractError(f"quantile argument must lie in (0,1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                 / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    q = p - 0.5
    r = q * q
    return ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
            / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))


def erf_inv_scalar(s: float) -> float:
    """Inverse error function on (-1, 1).

    Raises ContractError outside the open interval; erf_inv(0) is exactly 0.
    """
    if not -1.0 < s < 1.0:
        raise ContractError(f"erf_inv argument must lie in (-1,1), got {s}")
    if s == 0.0:
        return 0.0
    x = _normal_quantile((s + 1.0) / 2.0) / _SQRT2
    # Two Newton steps on erf(x) - s; quadratic convergence from a 1e-9 seed.
    for _ in range(2):
        err = math.erf(x) - s
        x -= err / (_TWO_OVER_SQRT_PI * math.exp(-x * x))
    return x
