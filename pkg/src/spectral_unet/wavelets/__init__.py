from enum import Enum

from .dtcwt import (
    ORIENTATIONS,
    Subbands,
    complex_to_quad,
    dtcwt_adjoint_backward,
    dtcwt_forward,
    dtcwt_inverse,
    dtcwt_inverse_backward,
    quad_to_complex,
)
from .filters import FilterBank, FilterReport, default_filterbank, validate_filterbank
from .haar import haar_forward, haar_inverse


class WaveletKind(str, Enum):
    DTCWT = "dtcwt"
    HAAR = "haar"


__all__ = [
    "ORIENTATIONS", "Subbands", "WaveletKind", "FilterBank", "FilterReport",
    "complex_to_quad", "quad_to_complex", "default_filterbank", "validate_filterbank",
    "dtcwt_forward", "dtcwt_inverse", "dtcwt_adjoint_backward", "dtcwt_inverse_backward",
    "haar_forward", "haar_inverse",
]
