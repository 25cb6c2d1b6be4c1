"""Synthetic OCT phantom with severity-linked structure and visual-field labels.

Each eye gets a latent severity s in [0, 1] (glaucomatous eyes draw from the
upper part of the range). B-scans render a layered retina whose bright superficial band
(the nerve-fiber layer) thins linearly with s, while the total retinal band
stays severity-independent; the class signal therefore lives strictly inside
the band mask. VF indices are deterministic monotone functions of s plus
Gaussian noise: vfi = 100(1-s), md = -35 s, psd = 20 s.

generate_synthetic_dataset writes voxel files, a manifest, and a geometry
sidecar (geometry.json) from which the exact retinal band mask of any slice
can be reconstructed. Output is byte-identical for a fixed spec.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data_model import (
    DatasetManifest,
    VfMeasurement,
    VolumeRecord,
    denormalize_vf,
    save_manifest,
    write_voxels,
)

GEOMETRY_FILE = "geometry.json"

# Layer reflectivities, dimmest to deepest.
_VITREOUS = 0.05
_RNFL = 0.80
_INNER = 0.35
_RPE = 0.85
_BELOW = 0.15

# Geometry priors, all as fractions of image height.
_T_BASE, _T_JIT = 0.25, 0.04        # top retina surface depth
_RETINA, _RETINA_JIT = 0.38, 0.03   # total band thickness (severity independent)
_RNFL_MAX, _RNFL_MIN = 0.17, 0.06   # nerve-fiber band: thins linearly with severity
_RPE_FRAC = 0.06                    # bright deep band at the bottom of the retina
_CURV, _CURV_JIT = 0.10, 0.04       # parabolic surface curvature across columns
_TILT_JIT = 0.04
_BOW, _BOW_JIT = 0.05, 0.02         # curvature along the slice axis
_VOL_OFFSET_SD = 0.010              # per-volume vertical shift
_SLICE_OFFSET_SD = 0.004            # per-slice vertical jitter
_GAIN_SD = 0.06                     # per-volume multiplicative brightness

_TWO_EYES_P = 0.7

# Latent severity intervals per class. The gap keeps the minimum cross-class
# structural difference resolvable at small image sizes; borderline disease
# with overlapping structure is out of scope for the phantom.
_SEV_GLAUCOMA = (0.6, 1.0)
_SEV_NORMAL = (0.0, 0.4)


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for one synthetic dataset."""

    n_patients: int = 20
    visits_per_patient: tuple[int, int] = (1, 2)
    volumes_per_visit: tuple[int, int] = (1, 2)
    bscans_per_volume: int = 64
    image_height: int = 64
    image_width: int = 64
    glaucoma_prevalence: float = 0.5
    vf_missing_rate: float = 0.3
    pixel_noise: float = 0.05
    structure_function_noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValueError(f"n_patients must be >= 1, got {self.n_patients}")
        for name in ("visits_per_patient", "volumes_per_visit"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if self.bscans_per_volume < 3:
            raise ValueError(f"bscans_per_volume must be >= 3, got {self.bscans_per_volume}")
        if self.image_height < 16 or self.image_width < 16:
            raise ValueError(
                f"image size must be >= 16x16, got {self.image_height}x{self.image_width}"
            )
        for name in ("glaucoma_prevalence", "vf_missing_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("pixel_noise", "structure_function_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


def _rnfl_frac(severity: float) -> float:
    return _RNFL_MAX - (_RNFL_MAX - _RNFL_MIN) * severity


def _vf_normalized(severity: float) -> np.ndarray:
    """Noiseless VF in normalized units: (vfi_n, md_n, psd_n)."""
    return np.array(
        [1.0 - severity, (35.0 - 35.0 * severity) / 40.0, severity]
    )


def _top_boundary(geom: dict, slice_index: int, height: int, width: int) -> np.ndarray:
    """Row coordinate of the retina surface for each column, in pixels."""
    n = geom["n_slices"]
    z = -1.0 + 2.0 * slice_index / (n - 1) if n > 1 else 0.0
    x = np.linspace(-1.0, 1.0, width)
    frac = (
        geom["t_base"]
        + geom["curvature"] * x**2
        + geom["tilt"] * x
        + geom["bow"] * z**2
        + geom["v_offset"]
        + geom["slice_offsets"][slice_index]
    )
    return frac * height


def _coverage(rows: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    # Fraction of pixel row [r, r+1) covered by the band [lo, hi).
    return np.clip(np.minimum(rows + 1.0, hi) - np.maximum(rows, lo), 0.0, 1.0)


def render_slice(geom: dict, slice_index: int, height: int, width: int) -> np.ndarray:
    """Noiseless slice image in [0, 1], float64 (h, w)."""
    t = _top_boundary(geom, slice_index, height, width)
    b_rnfl = t + geom["rnfl"] * height
    b_inner = t + (geom["retina"] - geom["rpe"]) * height
    b_bottom = t + geom["retina"] * height
    rows = np.arange(height, dtype=np.float64)[:, None]
    img = (
        _VITREOUS * _coverage(rows, np.full_like(t, -1e9), t)
        + _RNFL * _coverage(rows, t, b_rnfl)
        + _INNER * _coverage(rows, b_rnfl, b_inner)
        + _RPE * _coverage(rows, b_inner, b_bottom)
        + _BELOW * _coverage(rows, b_bottom, np.full_like(t, 1e9))
    )
    return img


def band_mask(geom: dict, slice_index: int, height: int, width: int) -> np.ndarray:
    """Boolean (h, w) mask of the retinal band (surface to band bottom)."""
    t = _top_boundary(geom, slice_index, height, width)
    b_bottom = t + geom["retina"] * height
    rows = np.arange(height, dtype=np.float64)[:, None]
    return _coverage(rows, t, b_bottom) > 0.5


def load_geometry(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / GEOMETRY_FILE
    if not path.is_file():
        raise FileNotFoundError(f"geometry sidecar not found: {path}")
    with open(path) as fh:
        return json.load(fh)


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir: str | Path) -> DatasetManifest:
    """Render a full dataset under ``out_dir`` and return its manifest.

    Writes volumes/<id>.bin voxel files, manifest.csv, and geometry.json.
    Reproducible bit-for-bit from ``spec`` alone: structure draws come from one
    seeded stream, per-volume pixel noise from per-volume streams keyed by the
    global volume index.
    """
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = spec.image_height, spec.image_width
    n_slices = spec.bscans_per_volume

    structure = np.random.default_rng([spec.seed, 0])
    records: list[VolumeRecord] = []
    geometries: dict[str, dict] = {}

    vol_index = 0
    for p in range(spec.n_patients):
        pid = f"P{p + 1:04d}"
        if structure.random() < _TWO_EYES_P:
            sides = ["left", "right"]
        else:
            sides = ["left" if structure.random() < 0.5 else "right"]
        for side in sides:
            is_glaucoma = structure.random() < spec.glaucoma_prevalence
            severity = float(
                structure.uniform(*_SEV_GLAUCOMA)
                if is_glaucoma
                else structure.uniform(*_SEV_NORMAL)
            )
            eye_geom = {
                "severity": severity,
                "t_base": float(_T_BASE + structure.normal(0.0, _T_JIT / 2)),
                "retina": float(_RETINA + structure.uniform(-_RETINA_JIT, _RETINA_JIT)),
                "rnfl": _rnfl_frac(severity),
                "rpe": _RPE_FRAC,
                "curvature": float(_CURV + structure.uniform(-_CURV_JIT, _CURV_JIT)),
                "tilt": float(structure.uniform(-_TILT_JIT, _TILT_JIT)),
                "bow": float(_BOW + structure.uniform(-_BOW_JIT, _BOW_JIT)),
            }
            n_visits = int(
                structure.integers(spec.visits_per_patient[0], spec.visits_per_patient[1] + 1)
            )
            for v in range(n_visits):
                visit_id = f"V{v + 1:02d}"
                vf_noise = structure.normal(0.0, spec.structure_function_noise, 3)
                vf_norm = np.clip(_vf_normalized(severity) + vf_noise, 0.0, 1.0)
                vf = denormalize_vf(tuple(vf_norm))
                n_vols = int(
                    structure.integers(spec.volumes_per_visit[0], spec.volumes_per_visit[1] + 1)
                )
                for k in range(n_vols):
                    volume_id = f"{pid}-{side[0].upper()}-{visit_id}-{k + 1:02d}"
                    gain = float(np.clip(structure.normal(1.0, _GAIN_SD), 0.75, 1.25))
                    v_offset = float(structure.normal(0.0, _VOL_OFFSET_SD))
                    missing = bool(structure.random() < spec.vf_missing_rate)

                    render = np.random.default_rng([spec.seed, 1, vol_index])
                    geom = dict(
                        eye_geom,
                        gain=gain,
                        v_offset=v_offset,
                        n_slices=n_slices,
                        slice_offsets=[
                            float(o) for o in render.normal(0.0, _SLICE_OFFSET_SD, n_slices)
                        ],
                    )
                    voxels = np.empty((n_slices, h, w), dtype=np.float32)
                    for z in range(n_slices):
                        img = gain * render_slice(geom, z, h, w)
                        img += render.normal(0.0, spec.pixel_noise, (h, w))
                        voxels[z] = np.clip(img, 0.0, 1.0)
                    data_path = f"volumes/{volume_id}.bin"
                    write_voxels(out_dir / data_path, voxels)

                    records.append(
                        VolumeRecord(
                            volume_id=volume_id,
                            patient_id=pid,
                            eye=side,
                            visit_id=visit_id,
                            class_label="glaucoma" if is_glaucoma else "normal",
                            vf=None if missing else vf,
                            vf_provenance="absent" if missing else "measured",
                            bscan_count=n_slices,
                            data_path=data_path,
                        )
                    )
                    geometries[volume_id] = geom
                    vol_index += 1

    manifest = DatasetManifest(records)
    save_manifest(manifest, out_dir / "manifest.csv")
    sidecar = {
        "spec": asdict(spec),
        "image_height": h,
        "image_width": w,
        "volumes": geometries,
    }
    with open(out_dir / GEOMETRY_FILE, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
