"""Image and mask handling: PNG I/O, log-space transforms, resizing and
binary morphology.

Images are ``H x W x 3`` float64 arrays wrapped in :class:`Image`, which keeps
track of whether values are linear intensities in ``[0, 1]`` or their
logarithms. Masks are plain ``H x W`` boolean arrays (``True`` = shadow).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from shadowad.errors import DataError, ValidationError

EPS_LOG = 1.0 / 255.0
LINEAR = "linear"
LOG = "log"


@dataclass(frozen=True, eq=False)
class Image:
    """An RGB raster in either the linear or the log domain."""

    data: np.ndarray
    domain: str = LINEAR

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValidationError(f"image must be H x W x 3, got shape {data.shape}")
        if self.domain not in (LINEAR, LOG):
            raise ValidationError(f"unknown domain {self.domain!r}")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.domain == other.domain and np.array_equal(self.data, other.data)


def as_mask(mask) -> np.ndarray:
    """Validate and return a 2-D boolean mask array."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.dtype != bool:
        raise ValidationError(f"mask must be boolean, got dtype {mask.dtype}")
    return mask


def check_pair(img: Image, mask: np.ndarray) -> None:
    if img.data.shape[:2] != mask.shape:
        raise ValidationError(
            f"dimension mismatch: image {img.data.shape[:2]} vs mask {mask.shape}"
        )


# --------------------------------------------------------------------------- I/O


def _open_png(path):
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    try:
        pil = PILImage.open(path)
        pil.load()
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    if pil.format != "PNG":
        raise DataError(f"not a PNG file: {path}")
    return pil


def load_image(path) -> Image:
    """Read an 8-bit RGB PNG into a linear-domain image (values ``v / 255``)."""
    pil = _open_png(path)
    if pil.mode != "RGB":
        raise DataError(f"non-RGB input: {path} has mode {pil.mode}")
    data = np.asarray(pil, dtype=np.uint8)
    if data.shape[0] == 0 or data.shape[1] == 0:
        raise DataError(f"empty image: {path}")
    return Image(data.astype(np.float64) / 255.0, LINEAR)


def quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: Image, path) -> None:
    if img.domain != LINEAR:
        raise ValidationError("only linear-domain images can be saved")
    try:
        PILImage.fromarray(quantize(img.data), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def load_mask(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG; pixels strictly above 127 are shadow."""
    pil = _open_png(path)
    if pil.mode != "L":
        raise DataError(f"non-grayscale mask: {path} has mode {pil.mode}")
    data = np.asarray(pil, dtype=np.uint8)
    if data.shape[0] == 0 or data.shape[1] == 0:
        raise DataError(f"empty mask: {path}")
    return data > 127


def save_mask(mask, path) -> None:
    mask = as_mask(mask)
    try:
        PILImage.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(
            path, format="PNG"
        )
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def save_gray(values: np.ndarray, path) -> None:
    """Write a float map in ``[0, 1]`` as an 8-bit grayscale PNG."""
    PILImage.fromarray(quantize(values), mode="L").save(path, format="PNG")


# --------------------------------------------------------------------- log space


def to_log_space(img: Image, eps_log: float = EPS_LOG) -> Image:
    if img.domain != LINEAR:
        raise ValidationError("to_log_space expects a linear-domain image")
    if not 0.0 < eps_log <= 0.1:
        raise ValidationError(f"eps_log must be in (0, 0.1], got {eps_log}")
    return Image(np.log(np.maximum(img.data, eps_log)), LOG)


def from_log_space(img: Image) -> Image:
    if img.domain != LOG:
        raise ValidationError("from_log_space expects a log-domain image")
    return Image(np.clip(np.exp(img.data), 0.0, 1.0), LINEAR)


# ---------------------------------------------------------------------- resizing


def _bilinear_axis(n_in: int, n_out: int):
    """Source indices and weights for half-pixel-centred linear interpolation."""
    centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    centers = np.clip(centers, 0.0, n_in - 1)
    lo = np.floor(centers).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = centers - lo
    return lo, hi, frac


def resize_array(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of the first two axes of ``arr``."""
    if h < 1 or w < 1:
        raise ValidationError(f"target size must be positive, got {h}x{w}")
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[:2] == (h, w):
        return arr.copy()
    lo, hi, fr = _bilinear_axis(arr.shape[0], h)
    fr = fr.reshape((-1,) + (1,) * (arr.ndim - 1))
    rows = arr[lo] * (1.0 - fr) + arr[hi] * fr
    lo, hi, fr = _bilinear_axis(arr.shape[1], w)
    fr = fr.reshape((1, -1) + (1,) * (arr.ndim - 2))
    return rows[:, lo] * (1.0 - fr) + rows[:, hi] * fr


def resize_image(img: Image, h: int, w: int) -> Image:
    return Image(resize_array(img.data, h, w), img.domain)


def resize_mask(mask, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize; output pixel ``i`` samples source ``floor((i + .5) n_in / n_out)``."""
    mask = as_mask(mask)
    if h < 1 or w < 1:
        raise ValidationError(f"target size must be positive, got {h}x{w}")
    rows = np.minimum(((np.arange(h) + 0.5) * mask.shape[0] / h).astype(np.int64), mask.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * mask.shape[1] / w).astype(np.int64), mask.shape[1] - 1)
    return mask[np.ix_(rows, cols)]


# -------------------------------------------------------------------- morphology


def default_band_radius(height: int, width: int) -> int:
    """Band radius 5 at 256x256, scaled linearly with the smaller side."""
    return max(1, int(round(5 * min(height, width) / 256)))


def _square(radius: int) -> np.ndarray:
    if int(radius) != radius or radius < 1:
        raise ValidationError(f"radius must be a positive integer, got {radius}")
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def dilate(mask, radius: int) -> np.ndarray:
    """Dilation by a ``(2r+1)``-square; pixels outside the image count as false."""
    return ndimage.binary_dilation(as_mask(mask), structure=_square(radius), border_value=0)


def erode(mask, radius: int, *, border_value: bool = False) -> np.ndarray:
    """Erosion by a ``(2r+1)``-square; pixels outside the image count as
    ``border_value`` (false by default, so masks shrink away from the border)."""
    return ndimage.binary_erosion(
        as_mask(mask), structure=_square(radius), border_value=int(border_value)
    )


def boundary_bands(mask, radius: int):
    """Return ``(b_in, b_out)``: the rings just inside and just outside the mask."""
    mask = as_mask(mask)
    if not mask.any():
        raise ValidationError("degenerate band: mask has no shadow pixels")
    b_out = dilate(mask, radius) & ~mask
    b_in = mask & ~erode(mask, radius)
    if not b_out.any() or not b_in.any():
        raise ValidationError("degenerate band: an inner or outer band is empty")
    return b_in, b_out


def boundary_pixels(mask) -> np.ndarray:
    """Shadow pixels with at least one in-image non-shadow 4-neighbour."""
    mask = as_mask(mask)
    pad = np.pad(mask, 1, mode="edge")
    has_false = (
        ~pad[:-2, 1:-1] | ~pad[2:, 1:-1] | ~pad[1:-1, :-2] | ~pad[1:-1, 2:]
    )
    return mask & has_false


def distance_to_boundary(mask) -> np.ndarray:
    """Exact Euclidean distance from every pixel to the nearest boundary pixel."""
    boundary = boundary_pixels(mask)
    if not boundary.any():
        raise ValidationError("mask has no shadow boundary")
    return ndimage.distance_transform_edt(~boundary)
