"""Synthetic shadow datasets with known reflectance, shadowing factors and
lights, plus loading of SBU-style image/mask directories.

Every sample is a pure function of ``(spec, seed, index)``: sample ``i`` draws
from ``numpy.random.Generator(PCG64(SeedSequence(seed, spawn_key=(i,))))``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from shadowad.errors import DataError, ValidationError
from shadowad.imaging import (
    LINEAR,
    Image,
    boundary_bands,
    default_band_radius,
    load_image,
    load_mask,
    save_image,
    save_mask,
)
from shadowad.physics import IlluminationParams, render_shadow_image

GENERATOR_NAME = "shadowad.synthdata"
GENERATOR_VERSION = 1
RNG_ALGORITHM = "numpy PCG64 seeded by SeedSequence(entropy=seed, spawn_key=(index,))"
TEXTURES = ("flat", "checker", "smooth-noise")
REFLECTANCE_MAX = 0.95
CHECKER_PERIOD = 8
MAX_BLOB_TRIES = 200


@dataclass(frozen=True)
class DatasetSpec:
    count: int = 300
    size: int = 64
    k_range: tuple = (0.0, 0.6)
    penumbra_sigma: float = 1.0
    texture: str = "smooth-noise"
    seed: int = 0
    reflectance_floor: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "k_range", tuple(float(v) for v in self.k_range))
        if self.count < 1:
            raise ValidationError("count must be >= 1")
        if self.size < 8:
            raise ValidationError("size must be >= 8")
        lo, hi = self.k_range
        if not 0.0 <= lo <= hi < 1.0:
            raise ValidationError("k_range must satisfy 0 <= k_lo <= k_hi < 1")
        if self.penumbra_sigma < 0:
            raise ValidationError("penumbra_sigma must be >= 0")
        if self.texture not in TEXTURES:
            raise ValidationError(f"texture must be one of {TEXTURES}")
        if not 0.0 < self.reflectance_floor < REFLECTANCE_MAX:
            raise ValidationError("reflectance_floor must be in (0, 0.95)")

    @property
    def band_radius(self) -> int:
        return default_band_radius(self.size, self.size)

    def to_dict(self):
        d = asdict(self)
        d["k_range"] = list(self.k_range)
        return d


@dataclass(frozen=True)
class Provenance:
    reflectance: Image
    k: np.ndarray
    lights: IlluminationParams
    k_core: float


@dataclass(frozen=True, eq=False)
class Sample:
    image: Image
    mask: np.ndarray
    provenance: Provenance | None = None
    name: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValidationError(f"dimension mismatch: {self.name}")


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def generate_reflectance(spec: DatasetSpec, rng: np.random.Generator) -> Image:
    lo, hi = spec.reflectance_floor, REFLECTANCE_MAX
    s = spec.size
    if spec.texture == "flat":
        return Image(np.full((s, s, 3), rng.uniform(lo, hi)), LINEAR)
    if spec.texture == "checker":
        colors = rng.uniform(lo, hi, size=(2, 3))
        idx = np.arange(s) // (CHECKER_PERIOD // 2)
        parity = (idx[:, None] + idx[None, :]) % 2
        return Image(colors[parity], LINEAR)
    # smooth-noise: blurred white noise stretched over a random sub-interval per channel
    noise = rng.standard_normal((s, s, 3))
    noise = ndimage.gaussian_filter(noise, sigma=(s / 16, s / 16, 0), mode="wrap")
    span = noise.max(axis=(0, 1)) - noise.min(axis=(0, 1))
    unit = (noise - noise.min(axis=(0, 1))) / np.where(span > 0, span, 1.0)
    a = rng.uniform(lo, hi, size=3)
    b = rng.uniform(lo, hi, size=3)
    return Image(np.minimum(a, b) + unit * np.abs(a - b), LINEAR)


def _ellipse(s: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    cy, cx = rng.uniform(0.25 * s, 0.75 * s, size=2)
    ry, rx = rng.uniform(0.1 * s, 0.3 * s, size=2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def generate_k_map(spec: DatasetSpec, rng: np.random.Generator, k_core: float | None = None):
    """Return ``(k_map, mask, k_core)`` for one random shadow blob.

    The blob is a union of 1-3 ellipses covering 5-40% of the image and
    staying clear of a ``2 * band_radius`` border margin. The penumbra is a
    Gaussian blur of the k-map; the mask is where ``k < (1 + k_core) / 2``.
    """
    s = spec.size
    margin = 2 * spec.band_radius
    if k_core is None:
        k_core = float(rng.uniform(*spec.k_range))
    for _ in range(MAX_BLOB_TRIES):
        blob = np.zeros((s, s), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            blob |= _ellipse(s, rng)
        k = np.where(blob, k_core, 1.0)
        if spec.penumbra_sigma > 0:
            k = np.clip(ndimage.gaussian_filter(k, spec.penumbra_sigma, mode="nearest"), k_core, 1.0)
        mask = k < (1.0 + k_core) / 2.0
        frac = mask.mean()
        if not 0.05 <= frac <= 0.40:
            continue
        border = np.ones((s, s), dtype=bool)
        border[margin : s - margin, margin : s - margin] = False
        if (mask & border).any() or (blob & border).any():
            continue
        try:
            boundary_bands(mask, spec.band_radius)
        except ValidationError:
            continue
        return k, mask, k_core
    raise ValidationError("blob generation retries exhausted; spec is degenerate")


def draw_lights(rng: np.random.Generator) -> IlluminationParams:
    env = rng.uniform(0.1, 0.3, size=3)
    direct = rng.uniform(0.4, 0.7, size=3)
    return IlluminationParams(direct, env)


def generate_sample(spec: DatasetSpec, index: int) -> Sample:
    rng = sample_rng(spec.seed, index)
    reflectance = generate_reflectance(spec, rng)
    k, mask, k_core = generate_k_map(spec, rng)
    lights = draw_lights(rng)
    image = render_shadow_image(reflectance, k, lights)
    return Sample(image, mask, Provenance(reflectance, k, lights, k_core), name=f"{index:04d}")


def generate_dataset(spec: DatasetSpec):
    """Generate ``spec.count`` samples. Returns ``(samples, manifest)``."""
    samples = [generate_sample(spec, i) for i in range(spec.count)]
    manifest = {
        "generator": GENERATOR_NAME,
        "generator_version": GENERATOR_VERSION,
        "rng": RNG_ALGORITHM,
        "spec": spec.to_dict(),
        "samples": [
            {
                "name": s.name,
                "seed": spec.seed,
                "spawn_key": [i],
                "k_core": s.provenance.k_core,
                "lights": s.provenance.lights.to_dict(),
            }
            for i, s in enumerate(samples)
        ],
    }
    return samples, manifest


def write_dataset(samples, manifest, out_dir) -> None:
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        for s in samples:
            save_image(s.image, out / "images" / f"{s.name}.png")
            save_mask(s.mask, out / "masks" / f"{s.name}.png")
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc


def _stems(directory):
    if not os.path.isdir(directory):
        raise DataError(f"not a directory: {directory}")
    return {p.stem: p for p in Path(directory).iterdir() if p.suffix.lower() == ".png"}


def load_directory_dataset(img_dir, mask_dir):
    """Load matching ``<stem>.png`` pairs, sorted by stem."""
    images, masks = _stems(img_dir), _stems(mask_dir)
    unmatched = sorted(set(images) ^ set(masks))
    if unmatched:
        raise DataError("unmatched stems: " + ", ".join(unmatched))
    samples, problems = [], []
    for stem in sorted(images):
        img = load_image(images[stem])
        mask = load_mask(masks[stem])
        if img.shape[:2] != mask.shape:
            problems.append(f"dimension mismatch: {stem}")
            continue
        samples.append(Sample(img, mask, None, name=stem))
    if problems:
        raise DataError("; ".join(problems))
    return samples


def load_dataset_dir(root):
    """Load a dataset laid out as ``root/images`` and ``root/masks``."""
    return load_directory_dataset(Path(root) / "images", Path(root) / "masks")
