"""Two-light illumination model: shadow rendering, illumination ratios,
shadow strength, the physics loss and the adaptive adversarial weight.

A pixel receives a fraction ``k`` of the direct light plus all of the
environment light, so ``I = (k * L_d + L_e) * R`` per channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from shadowad.errors import ValidationError
from shadowad.imaging import (
    EPS_LOG,
    LINEAR,
    LOG,
    Image,
    as_mask,
    boundary_bands,
    default_band_radius,
)

LOG_FLOOR = float(np.log(EPS_LOG))


@dataclass(frozen=True, eq=False)
class IlluminationParams:
    """Direct (``L_d``) and environment (``L_e``) light colours, one value per channel."""

    direct: np.ndarray
    environment: np.ndarray

    def __post_init__(self):
        direct = np.asarray(self.direct, dtype=np.float64).reshape(-1)
        env = np.asarray(self.environment, dtype=np.float64).reshape(-1)
        if direct.shape != (3,) or env.shape != (3,):
            raise ValidationError("lights must be RGB triples")
        if np.any(direct < 0):
            raise ValidationError("direct light must be nonnegative")
        if np.any(env <= 0):
            raise ValidationError("environment light must be positive in every channel")
        object.__setattr__(self, "direct", direct)
        object.__setattr__(self, "environment", env)

    def to_dict(self):
        return {"direct": self.direct.tolist(), "environment": self.environment.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["direct"], d["environment"])


@dataclass(frozen=True)
class LossWeights:
    nsd: float = 30.0
    sd: float = 1.0
    ph: float = 100.0
    real: float = 0.8
    adv0: float = 0.2
    epsilon: float = 0.05

    def __post_init__(self):
        for name in ("nsd", "sd", "ph", "real", "adv0"):
            if getattr(self, name) < 0:
                raise ValidationError(f"loss weight {name} must be nonnegative")
        if not 0.0 < self.epsilon < 0.5:
            raise ValidationError(f"epsilon must be in (0, 0.5), got {self.epsilon}")


def check_k_map(k, shape=None) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2:
        raise ValidationError(f"k-map must be 2-D, got shape {k.shape}")
    if shape is not None and k.shape != tuple(shape):
        raise ValidationError(f"dimension mismatch: k-map {k.shape} vs image {tuple(shape)}")
    if np.any(k < 0) or np.any(k > 1):
        raise ValidationError("k-map values must lie in [0, 1]")
    return k


def render_shadow_image(reflectance: Image, k, lights: IlluminationParams) -> Image:
    if reflectance.domain != LINEAR:
        raise ValidationError("reflectance must be linear-domain")
    k = check_k_map(k, reflectance.shape[:2])
    gain = k[..., None] * lights.direct + lights.environment
    return Image(np.clip(gain * reflectance.data, 0.0, 1.0), LINEAR)


def shadow_free_ratio(lights: IlluminationParams, k: float) -> np.ndarray:
    """Per-channel ratio of the fully lit to the shadowed value, ``(L_d + L_e) / (k L_d + L_e)``."""
    if not 0.0 <= k <= 1.0:
        raise ValidationError(f"k must be in [0, 1], got {k}")
    return (lights.direct + lights.environment) / (k * lights.direct + lights.environment)


def intensity(img: Image) -> np.ndarray:
    """Unweighted channel mean of the linear image."""
    data = np.exp(img.data) if img.domain == LOG else img.data
    return data.mean(axis=2)


def band_means_ratio(gray: np.ndarray, b_in: np.ndarray, b_out: np.ndarray) -> float:
    inside = max(float(gray[b_in].mean()), EPS_LOG)
    return float(gray[b_out].mean()) / inside


def shadow_strength(img: Image, mask, band_radius: int | None = None) -> float:
    """Mean intensity just outside the mask boundary over the mean just inside.

    Log-domain images are exponentiated first. ``band_radius`` defaults to
    :func:`~shadowad.imaging.default_band_radius` for the image size.
    """
    mask = as_mask(mask)
    if img.shape[:2] != mask.shape:
        raise ValidationError("dimension mismatch between image and mask")
    if band_radius is None:
        band_radius = default_band_radius(*mask.shape)
    b_in, b_out = boundary_bands(mask, band_radius)
    return band_means_ratio(intensity(img), b_in, b_out)


def adaptive_adv_weight(k_strength: float, weights: LossWeights = LossWeights()) -> float:
    """``adv0`` if the shadow is still visible (``k_strength > 1 + epsilon``), else 0."""
    if k_strength < 0:
        raise ValidationError("k_strength must be nonnegative")
    return weights.adv0 if k_strength > 1.0 + weights.epsilon else 0.0


def _log_data(x) -> np.ndarray:
    if isinstance(x, Image):
        if x.domain != LOG:
            raise ValidationError("expected a log-domain image")
        return x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 array, got {x.shape}")
    return x


def physics_loss(a_out, inp, mask):
    """Sum over channels of the population variance, over shadow pixels, of
    the log ratio between the attenuated and the input image.

    Both images are log-domain. Returns ``(loss, grad)`` where ``grad`` is the
    derivative with respect to ``a_out`` (zero outside the mask and wherever
    ``a_out`` sits below the log floor).
    """
    a = _log_data(a_out)
    x = _log_data(inp)
    mask = as_mask(mask)
    if a.shape != x.shape or a.shape[:2] != mask.shape:
        raise ValidationError("dimension mismatch in physics_loss")
    n = int(mask.sum())
    if n < 2:
        raise ValidationError("physics_loss needs at least 2 shadow pixels")
    a_m = a[mask]
    diff = np.maximum(a_m, LOG_FLOOR) - np.maximum(x[mask], LOG_FLOOR)
    centered = diff - diff.mean(axis=0)
    loss = float((centered**2).sum() / n)
    grad = np.zeros_like(a)
    grad[mask] = 2.0 * centered / n * (a_m >= LOG_FLOOR)
    return loss, grad
