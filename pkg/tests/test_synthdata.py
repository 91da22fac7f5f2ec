import json

import numpy as np
import pytest

from shadowad.errors import DataError, ValidationError
from shadowad.imaging import Image, quantize, save_image, save_mask
from shadowad.physics import IlluminationParams, render_shadow_image, shadow_free_ratio, shadow_strength
from shadowad.synthdata import (
    DatasetSpec,
    generate_dataset,
    generate_k_map,
    generate_reflectance,
    load_directory_dataset,
    sample_rng,
    write_dataset,
)


def test_flat_reflectance_is_constant():
    img = generate_reflectance(DatasetSpec(texture="flat"), sample_rng(0, 0))
    assert np.all(img.data == img.data[0, 0, 0])
    assert 0.15 <= img.data[0, 0, 0] <= 0.95


@pytest.mark.parametrize("texture", ["flat", "checker", "smooth-noise"])
def test_reflectance_determinism_and_range(texture):
    spec = DatasetSpec(texture=texture)
    a = generate_reflectance(spec, sample_rng(1, 0)).data
    b = generate_reflectance(spec, sample_rng(1, 0)).data
    c = generate_reflectance(spec, sample_rng(2, 0)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= 0.15 and a.max() <= 0.95


def test_checker_period_is_eight():
    img = generate_reflectance(DatasetSpec(texture="checker", size=64), sample_rng(3, 0)).data[..., 0]
    row = img[0] - img[0].mean()
    autocorr = np.array([np.dot(row, np.roll(row, s)) for s in range(16)])
    assert np.argmax(autocorr[1:]) + 1 == 8
    assert autocorr[4] < 0  # half a period out of phase
    np.testing.assert_array_equal(img, np.roll(img, 8, axis=0))
    assert len(np.unique(img)) == 2


def test_hard_k_map_is_two_valued():
    spec = DatasetSpec(penumbra_sigma=0.0)
    k, mask, k_core = generate_k_map(spec, sample_rng(0, 1))
    assert set(np.unique(k)) == {k_core, 1.0}
    np.testing.assert_array_equal(mask, k == k_core)


def test_blurred_k_map_range():
    spec = DatasetSpec(penumbra_sigma=2.0)
    for i in range(10):
        k, mask, k_core = generate_k_map(spec, sample_rng(4, i))
        assert k.min() >= k_core and k.max() <= 1.0
        assert np.any((k > k_core) & (k < 1.0))


def test_mask_area_fraction_over_100_seeds():
    spec = DatasetSpec()
    fracs = [generate_k_map(spec, sample_rng(seed, 0))[1].mean() for seed in range(100)]
    assert min(fracs) >= 0.05 and max(fracs) <= 0.40


def test_mask_clear_of_border_margin():
    spec = DatasetSpec(size=128)
    margin = 2 * spec.band_radius
    for i in range(20):
        _, mask, _ = generate_k_map(spec, sample_rng(9, i))
        assert not mask[:margin].any() and not mask[-margin:].any()
        assert not mask[:, :margin].any() and not mask[:, -margin:].any()


def test_spec_validation():
    with pytest.raises(ValidationError):
        DatasetSpec(count=0)
    with pytest.raises(ValidationError):
        DatasetSpec(k_range=(0.5, 0.2))
    with pytest.raises(ValidationError):
        DatasetSpec(texture="plaid")
    with pytest.raises(ValidationError):
        DatasetSpec(penumbra_sigma=-1)


def test_samples_reproduce_from_provenance():
    samples, manifest = generate_dataset(DatasetSpec(count=5, seed=11))
    for s in samples:
        p = s.provenance
        np.testing.assert_array_equal(render_shadow_image(p.reflectance, p.k, p.lights).data, s.image.data)
        # quantized image stays within one 8-bit step of the render
        assert np.max(np.abs(quantize(s.image.data) / 255.0 - s.image.data)) <= 1 / 255
        assert np.all(p.lights.environment >= 0.1) and np.all(p.lights.environment <= 0.3)
        assert np.all(p.lights.direct >= 0.4) and np.all(p.lights.direct <= 0.7)
    assert [r["k_core"] for r in manifest["samples"]] == [s.provenance.k_core for s in samples]
    assert manifest["spec"]["seed"] == 11


def test_flat_hard_samples_match_ratio_oracle():
    samples, _ = generate_dataset(DatasetSpec(count=20, texture="flat", penumbra_sigma=0.0, seed=2))
    for s in samples:
        lights, k = s.provenance.lights, s.provenance.k_core
        gray = IlluminationParams(np.full(3, lights.direct.mean()), np.full(3, lights.environment.mean()))
        expected = shadow_free_ratio(gray, k).mean()
        assert shadow_strength(s.image, s.mask) == pytest.approx(expected, rel=0.02)


def test_generation_is_deterministic(tmp_path):
    spec = DatasetSpec(count=3, size=32, seed=5)
    for d in ("a", "b"):
        write_dataset(*generate_dataset(spec), tmp_path / d)
    for rel in ["manifest.json", "images/0000.png", "images/0002.png", "masks/0001.png"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert "PCG64" in manifest["rng"]


def test_samples_independent_of_count():
    a, _ = generate_dataset(DatasetSpec(count=2, seed=8))
    b, _ = generate_dataset(DatasetSpec(count=4, seed=8))
    np.testing.assert_array_equal(a[1].image.data, b[1].image.data)


def _write_pair(tmp_path, stem, size=(8, 8), mask_size=None):
    (tmp_path / "img").mkdir(exist_ok=True)
    (tmp_path / "msk").mkdir(exist_ok=True)
    save_image(Image(np.full(size + (3,), 0.5)), tmp_path / "img" / f"{stem}.png")
    m = np.zeros(mask_size or size, bool)
    m[2:5, 2:5] = True
    save_mask(m, tmp_path / "msk" / f"{stem}.png")


def test_directory_dataset_sorted(tmp_path):
    for stem in ["b", "c", "a"]:
        _write_pair(tmp_path, stem)
    samples = load_directory_dataset(tmp_path / "img", tmp_path / "msk")
    assert [s.name for s in samples] == ["a", "b", "c"]
    assert all(s.provenance is None for s in samples)


def test_directory_dataset_unmatched(tmp_path):
    _write_pair(tmp_path, "a")
    save_image(Image(np.zeros((8, 8, 3))), tmp_path / "img" / "orphan.png")
    with pytest.raises(DataError, match="orphan"):
        load_directory_dataset(tmp_path / "img", tmp_path / "msk")


def test_directory_dataset_dimension_mismatch(tmp_path):
    _write_pair(tmp_path, "a", mask_size=(8, 9))
    with pytest.raises(DataError, match="dimension mismatch: a"):
        load_directory_dataset(tmp_path / "img", tmp_path / "msk")
