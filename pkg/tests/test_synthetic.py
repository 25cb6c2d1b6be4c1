"""Phantom generator: reproducibility, severity coupling, masks, VF functions."""

import json

import numpy as np
import pytest

from octscreen.data_model import read_voxels
from octscreen.synthetic import (
    SyntheticSpec,
    band_mask,
    generate_synthetic_dataset,
    load_geometry,
    render_slice,
)

SMALL = SyntheticSpec(
    n_patients=6,
    visits_per_patient=(1, 2),
    volumes_per_visit=(1, 2),
    bscans_per_volume=6,
    image_height=24,
    image_width=24,
    vf_missing_rate=0.3,
    pixel_noise=0.05,
    structure_function_noise=0.03,
    seed=21,
)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    manifest = generate_synthetic_dataset(SMALL, root)
    return root, manifest


class TestSpecValidation:
    @pytest.mark.parametrize(
        "kwargs,match",
        [
            (dict(n_patients=0), "n_patients"),
            (dict(bscans_per_volume=2), "bscans_per_volume"),
            (dict(image_height=8), "image size"),
            (dict(glaucoma_prevalence=1.5), "glaucoma_prevalence"),
            (dict(vf_missing_rate=-0.1), "vf_missing_rate"),
            (dict(pixel_noise=-1.0), "pixel_noise"),
            (dict(visits_per_patient=(2, 1)), "visits_per_patient"),
            (dict(volumes_per_visit=(0, 1)), "volumes_per_visit"),
        ],
    )
    def test_rejects(self, kwargs, match, tmp_path):
        from dataclasses import replace

        spec = replace(SMALL, **kwargs)
        with pytest.raises(ValueError, match=match):
            generate_synthetic_dataset(spec, tmp_path)


class TestReproducibility:
    def test_byte_identical_outputs(self, tmp_path, small_dataset):
        root_a, manifest = small_dataset
        root_b = tmp_path / "again"
        generate_synthetic_dataset(SMALL, root_b)
        assert (root_a / "manifest.csv").read_bytes() == (root_b / "manifest.csv").read_bytes()
        assert (root_a / "geometry.json").read_bytes() == (root_b / "geometry.json").read_bytes()
        for rec in manifest:
            assert (root_a / rec.data_path).read_bytes() == (root_b / rec.data_path).read_bytes()

    def test_seed_changes_content(self, tmp_path):
        from dataclasses import replace

        root = tmp_path / "other_seed"
        generate_synthetic_dataset(replace(SMALL, seed=22), root)
        root2 = tmp_path / "orig"
        generate_synthetic_dataset(SMALL, root2)
        assert (root / "manifest.csv").read_bytes() != (root2 / "manifest.csv").read_bytes()


class TestManifestShape:
    def test_record_invariants(self, small_dataset):
        root, manifest = small_dataset
        for rec in manifest:
            assert rec.bscan_count == SMALL.bscans_per_volume
            assert (root / rec.data_path).is_file()
            voxels = read_voxels(root / rec.data_path)
            assert voxels.shape == (6, 24, 24)
            assert voxels.min() >= 0.0 and voxels.max() <= 1.0

    def test_both_classes_present(self, small_dataset):
        _, manifest = small_dataset
        assert {rec.class_label for rec in manifest} == {"glaucoma", "normal"}

    def test_eyes_at_most_two_per_patient(self, small_dataset):
        _, manifest = small_dataset
        eyes: dict[str, set] = {}
        for rec in manifest:
            eyes.setdefault(rec.patient_id, set()).add(rec.eye)
        assert all(len(v) <= 2 for v in eyes.values())

    def test_missing_rate_extremes(self, tmp_path):
        from dataclasses import replace

        none_missing = generate_synthetic_dataset(
            replace(SMALL, vf_missing_rate=0.0), tmp_path / "none"
        )
        assert all(rec.vf_provenance == "measured" for rec in none_missing)
        all_missing = generate_synthetic_dataset(
            replace(SMALL, vf_missing_rate=1.0), tmp_path / "all"
        )
        assert all(rec.vf_provenance == "absent" for rec in all_missing)

    def test_single_class_allowed(self, tmp_path):
        from dataclasses import replace

        manifest = generate_synthetic_dataset(
            replace(SMALL, glaucoma_prevalence=0.0), tmp_path / "single"
        )
        assert {rec.class_label for rec in manifest} == {"normal"}


class TestSeverityCoupling:
    def test_severity_ranges_by_class(self, small_dataset):
        root, manifest = small_dataset
        geo = load_geometry(root)["volumes"]
        for rec in manifest:
            s = geo[rec.volume_id]["severity"]
            if rec.class_label == "glaucoma":
                assert 0.6 <= s <= 1.0
            else:
                assert 0.0 <= s <= 0.4

    def test_rnfl_thins_linearly_with_severity(self, small_dataset):
        root, manifest = small_dataset
        geo = load_geometry(root)["volumes"]
        for entry in geo.values():
            expected = 0.17 - (0.17 - 0.06) * entry["severity"]
            assert abs(entry["rnfl"] - expected) < 1e-12

    def test_retina_band_independent_of_severity(self, small_dataset):
        root, _ = small_dataset
        geo = load_geometry(root)["volumes"]
        severities = np.array([g["severity"] for g in geo.values()])
        retinas = np.array([g["retina"] for g in geo.values()])
        # the total band is jittered noise, not a severity signal
        assert abs(np.corrcoef(severities, retinas)[0, 1]) < 0.8


class TestVfFunctions:
    def test_zero_noise_exact_functions(self, tmp_path):
        from dataclasses import replace

        spec = replace(SMALL, structure_function_noise=0.0, vf_missing_rate=0.0)
        root = tmp_path / "zero_noise"
        manifest = generate_synthetic_dataset(spec, root)
        geo = load_geometry(root)["volumes"]
        for rec in manifest:
            s = geo[rec.volume_id]["severity"]
            np.testing.assert_allclose(
                rec.vf.as_tuple(),
                (100.0 * (1.0 - s), -35.0 * s, 20.0 * s),
                rtol=0,
                atol=1e-9,
            )

    def test_abs_md_correlates_one_with_severity(self, tmp_path):
        from dataclasses import replace

        spec = replace(
            SMALL, n_patients=12, structure_function_noise=0.0, vf_missing_rate=0.0
        )
        root = tmp_path / "corr"
        manifest = generate_synthetic_dataset(spec, root)
        geo = load_geometry(root)["volumes"]
        severities = np.array([geo[r.volume_id]["severity"] for r in manifest])
        abs_md = np.array([abs(r.vf.md) for r in manifest])
        r = np.corrcoef(severities, abs_md)[0, 1]
        assert abs(r - 1.0) < 1e-12

    def test_monotone_directions(self, tmp_path):
        from dataclasses import replace

        spec = replace(
            SMALL, n_patients=12, structure_function_noise=0.0, vf_missing_rate=0.0
        )
        root = tmp_path / "mono"
        manifest = generate_synthetic_dataset(spec, root)
        geo = load_geometry(root)["volumes"]
        rows = sorted(
            (geo[r.volume_id]["severity"], *r.vf.as_tuple()) for r in manifest
        )
        arr = np.array(rows)
        assert (np.diff(arr[:, 1]) <= 1e-12).all()   # vfi falls
        assert (np.diff(arr[:, 2]) <= 1e-12).all()   # md falls
        assert (np.diff(arr[:, 3]) >= -1e-12).all()  # psd rises


class TestRenderingAndMask:
    def test_band_mask_contains_bright_structure(self, small_dataset):
        """Everything brighter than the inner layers must sit inside the band."""
        root, manifest = small_dataset
        geo = load_geometry(root)["volumes"]
        for rec in list(manifest)[:5]:
            entry = geo[rec.volume_id]
            for z in (0, SMALL.bscans_per_volume // 2):
                clean = render_slice(entry, z, 24, 24)
                mask = band_mask(entry, z, 24, 24)
                assert not ((clean > 0.5) & ~mask).any()

    def test_band_mask_fraction_close_to_retina(self, small_dataset):
        root, manifest = small_dataset
        geo = load_geometry(root)["volumes"]
        rec = manifest.records[0]
        entry = geo[rec.volume_id]
        mask = band_mask(entry, 2, 24, 24)
        assert abs(mask.mean() - entry["retina"]) < 0.08

    def test_render_is_pure(self, small_dataset):
        root, manifest = small_dataset
        geo = load_geometry(root)["volumes"]
        entry = geo[manifest.records[0].volume_id]
        a = render_slice(entry, 1, 24, 24)
        b = render_slice(entry, 1, 24, 24)
        np.testing.assert_array_equal(a, b)

    def test_geometry_sidecar_shape(self, small_dataset):
        root, manifest = small_dataset
        sidecar = json.loads((root / "geometry.json").read_text())
        assert sidecar["image_height"] == 24
        assert set(sidecar["volumes"]) == {rec.volume_id for rec in manifest}
        entry = sidecar["volumes"][manifest.records[0].volume_id]
        assert len(entry["slice_offsets"]) == SMALL.bscans_per_volume
