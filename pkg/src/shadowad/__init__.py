"""Adversarial shadow attenuation for shadow detection.

An attenuator network weakens shadows under a two-light illumination model and
is trained jointly against a shadow detector, which learns from both the
original and the attenuated images.
"""

from shadowad.errors import (
    DataError,
    ModelMismatchError,
    NumericalError,
    ShadowADError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "ModelMismatchError",
    "NumericalError",
    "ShadowADError",
    "ValidationError",
    "__version__",
]
