"""Score-based speech enhancement conditioned on an explicit degradation encoder."""

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    DegradiffError,
    DivergenceError,
    EstimationError,
    GeometryError,
    LengthError,
    NumericError,
    RangeError,
    VersioningError,
)
from .signal import ComplexSpectrogram, Waveform, istft, read_wav, stft, write_wav

__version__ = "0.1.0"

__all__ = [
    "ComplexSpectrogram",
    "ConfigurationError",
    "DegenerateInputError",
    "DegradiffError",
    "DivergenceError",
    "EstimationError",
    "GeometryError",
    "LengthError",
    "NumericError",
    "RangeError",
    "VersioningError",
    "Waveform",
    "istft",
    "read_wav",
    "stft",
    "write_wav",
]
