"""Dataset schema: volume records, manifest CSV I/O, voxel files, splits, triplets.

A dataset is a manifest CSV plus one raw voxel file per volume. All downstream
stages communicate through these files, so validation is strict here and
everything loaded is immutable.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

MANIFEST_COLUMNS = (
    "volume_id",
    "patient_id",
    "eye",
    "visit_id",
    "class_label",
    "vfi",
    "md",
    "psd",
    "vf_provenance",
    "bscan_count",
    "data_path",
)

# Clinical value boxes for the three visual-field attributes.
VFI_RANGE = (0.0, 100.0)   # percent
MD_RANGE = (-35.0, 5.0)    # dB
PSD_RANGE = (0.0, 20.0)    # dB

EYES = ("left", "right")
GLAUCOMA = "glaucoma"
NORMAL = "normal"
CLASS_LABELS = (GLAUCOMA, NORMAL)
PROVENANCES = ("measured", "surrogate", "absent")
SPLIT_TAGS = ("unsplit", "train", "val", "test")

MIN_BSCANS = 3  # triplet assembly needs three adjacent slices

_VOXEL_HEADER = struct.Struct("<III")


class ManifestError(ValueError):
    """Manifest validation failure; ``errors`` holds one message per problem."""

    def __init__(self, errors: Iterable[str]):
        self.errors = list(errors)
        super().__init__("manifest validation failed:\n" + "\n".join(self.errors))


@dataclass(frozen=True)
class VfMeasurement:
    """One visual-field test result, in clinical units."""

    vfi: float
    md: float
    psd: float

    def __post_init__(self):
        for name, value, (lo, hi) in (
            ("vfi", self.vfi, VFI_RANGE),
            ("md", self.md, MD_RANGE),
            ("psd", self.psd, PSD_RANGE),
        ):
            value = float(value)
            if not np.isfinite(value) or not lo <= value <= hi:
                raise ValueError(
                    f"{name}={value!r} outside clinical range [{lo}, {hi}]"
                )
            object.__setattr__(self, name, value)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.vfi, self.md, self.psd)


@dataclass(frozen=True)
class VolumeRecord:
    """One OCT volume: identity, class label, optional VF label, voxel location.

    ``vf_provenance`` tracks where the VF label came from: ``measured`` (from
    the original record), ``surrogate`` (copied from a nearest neighbour), or
    ``absent`` (no label; ``vf`` must be None exactly in this case).
    """

    volume_id: str
    patient_id: str
    eye: str
    visit_id: str
    class_label: str
    vf: VfMeasurement | None
    vf_provenance: str
    bscan_count: int
    data_path: str

    def __post_init__(self):
        for name in ("volume_id", "patient_id", "visit_id", "data_path"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
        if self.eye not in EYES:
            raise ValueError(f"eye={self.eye!r} not in {EYES}")
        if self.class_label not in CLASS_LABELS:
            raise ValueError(f"class_label={self.class_label!r} not in {CLASS_LABELS}")
        if self.vf_provenance not in PROVENANCES:
            raise ValueError(
                f"vf_provenance={self.vf_provenance!r} not in {PROVENANCES}"
            )
        if (self.vf is None) != (self.vf_provenance == "absent"):
            raise ValueError(
                f"volume {self.volume_id}: vf_provenance={self.vf_provenance!r} "
                f"inconsistent with vf={'absent' if self.vf is None else 'present'}"
            )
        if int(self.bscan_count) < MIN_BSCANS:
            raise ValueError(
                f"volume {self.volume_id}: bscan_count={self.bscan_count} "
                f"(need >= {MIN_BSCANS} for triplet assembly)"
            )
        object.__setattr__(self, "bscan_count", int(self.bscan_count))

    @property
    def label(self) -> int:
        """Binary class with glaucoma as the positive class."""
        return 1 if self.class_label == GLAUCOMA else 0

    @property
    def case_key(self) -> tuple[str, str, str]:
        """Grouping key for eye-visit ("case") level aggregation."""
        return (self.patient_id, self.eye, self.visit_id)

    @property
    def has_vf(self) -> bool:
        return self.vf is not None


class DatasetManifest:
    """Immutable ordered collection of volume records with unique ids."""

    def __init__(self, records: Iterable[VolumeRecord], split_tag: str = "unsplit"):
        records = tuple(records)
        if split_tag not in SPLIT_TAGS:
            raise ValueError(f"split_tag={split_tag!r} not in {SPLIT_TAGS}")
        seen: set[str] = set()
        for rec in records:
            if rec.volume_id in seen:
                raise ManifestError([f"duplicate volume_id {rec.volume_id!r}"])
            seen.add(rec.volume_id)
        self._records = records
        self._by_id = {rec.volume_id: rec for rec in records}
        self.split_tag = split_tag

    @property
    def records(self) -> tuple[VolumeRecord, ...]:
        return self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[VolumeRecord]:
        return iter(self._records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self._records == other._records and self.split_tag == other.split_tag

    def by_id(self, volume_id: str) -> VolumeRecord:
        try:
            return self._by_id[volume_id]
        except KeyError:
            raise KeyError(f"no volume {volume_id!r} in manifest") from None

    def patient_ids(self) -> list[str]:
        """Unique patient ids in first-appearance order."""
        return list(dict.fromkeys(rec.patient_id for rec in self._records))

    def with_records(self, records: Iterable[VolumeRecord]) -> "DatasetManifest":
        return DatasetManifest(records, split_tag=self.split_tag)


def _parse_row(row: dict[str, str], rownum: int, errors: list[str]) -> VolumeRecord | None:
    vf_raw = [row["vfi"], row["md"], row["psd"]]
    present = [v != "" for v in vf_raw]
    vf = None
    if all(present):
        try:
            vf = VfMeasurement(float(vf_raw[0]), float(vf_raw[1]), float(vf_raw[2]))
        except ValueError as exc:
            errors.append(f"row {rownum}: {exc}")
            return None
    elif any(present):
        missing = [n for n, p in zip(("vfi", "md", "psd"), present) if not p]
        errors.append(
            f"row {rownum}: partial VF measurement (missing {', '.join(missing)})"
        )
        return None
    try:
        count = int(row["bscan_count"])
    except ValueError:
        errors.append(f"row {rownum}: bscan_count={row['bscan_count']!r} is not an integer")
        return None
    try:
        return VolumeRecord(
            volume_id=row["volume_id"],
            patient_id=row["patient_id"],
            eye=row["eye"],
            visit_id=row["visit_id"],
            class_label=row["class_label"],
            vf=vf,
            vf_provenance=row["vf_provenance"],
            bscan_count=count,
            data_path=row["data_path"],
        )
    except ValueError as exc:
        errors.append(f"row {rownum}: {exc}")
        return None


def load_manifest(path: str | Path, split_tag: str = "unsplit") -> DatasetManifest:
    """Parse and validate a manifest CSV. Raises ManifestError listing every bad row."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(["empty file (missing header)"]) from None
        if tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(
                [f"bad header {header!r}, expected {list(MANIFEST_COLUMNS)!r}"]
            )
        errors: list[str] = []
        records: list[VolumeRecord] = []
        seen: set[str] = set()
        for rownum, raw in enumerate(reader, start=2):
            if len(raw) != len(MANIFEST_COLUMNS):
                errors.append(f"row {rownum}: expected {len(MANIFEST_COLUMNS)} fields, got {len(raw)}")
                continue
            row = dict(zip(MANIFEST_COLUMNS, raw))
            rec = _parse_row(row, rownum, errors)
            if rec is None:
                continue
            if rec.volume_id in seen:
                errors.append(f"row {rownum}: duplicate volume_id {rec.volume_id!r}")
                continue
            seen.add(rec.volume_id)
            records.append(rec)
    if errors:
        raise ManifestError(errors)
    return DatasetManifest(records, split_tag=split_tag)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write a manifest CSV; absent VF fields are empty strings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in manifest:
            vf = rec.vf.as_tuple() if rec.vf is not None else ("", "", "")
            writer.writerow(
                [
                    rec.volume_id,
                    rec.patient_id,
                    rec.eye,
                    rec.visit_id,
                    rec.class_label,
                    *(repr(v) if v != "" else "" for v in vf),
                    rec.vf_provenance,
                    rec.bscan_count,
                    rec.data_path,
                ]
            )
    return path


# ---------------------------------------------------------------------------
# VF normalization: affine bijection between the clinical box and [0, 1]^3.

_VF_RANGES = (VFI_RANGE, MD_RANGE, PSD_RANGE)


def normalize_vf(vf: VfMeasurement) -> tuple[float, float, float]:
    """Map a clinical VF measurement onto the unit cube."""
    return tuple(
        (value - lo) / (hi - lo)
        for value, (lo, hi) in zip(vf.as_tuple(), _VF_RANGES)
    )


def denormalize_vf(values: tuple[float, float, float]) -> VfMeasurement:
    """Inverse of normalize_vf; inputs must lie in [0, 1]."""
    vfi, md, psd = (
        lo + float(t) * (hi - lo) for t, (lo, hi) in zip(values, _VF_RANGES)
    )
    return VfMeasurement(vfi, md, psd)


def normalize_vf_array(values: np.ndarray) -> np.ndarray:
    """Vectorized normalize for an (n, 3) array of clinical-unit rows."""
    values = np.asarray(values, dtype=np.float64)
    lo = np.array([r[0] for r in _VF_RANGES])
    hi = np.array([r[1] for r in _VF_RANGES])
    return (values - lo) / (hi - lo)


def denormalize_vf_array(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    lo = np.array([r[0] for r in _VF_RANGES])
    hi = np.array([r[1] for r in _VF_RANGES])
    return lo + values * (hi - lo)


# ---------------------------------------------------------------------------
# Patient-level splitting.


def split_by_patient(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float],
    seed: int,
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Partition volumes into train/val/test with no patient in two splits.

    Patients are shuffled deterministically from ``seed`` and assigned to
    splits by walking cumulative volume counts against the target fractions,
    so realized fractions deviate by at most one patient's volume count.
    """
    if len(ratios) != 3:
        raise ValueError(f"need exactly three ratios, got {len(ratios)}")
    if any(not (r > 0) for r in ratios):
        raise ValueError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got sum={sum(ratios)!r}")
    patients = sorted({rec.patient_id for rec in manifest})
    if len(patients) < 3:
        raise ValueError(
            f"cannot make three patient-disjoint splits from {len(patients)} patient(s)"
        )
    counts: dict[str, int] = {}
    for rec in manifest:
        counts[rec.patient_id] = counts.get(rec.patient_id, 0) + 1

    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]

    total = len(manifest)
    bound1 = ratios[0] * total
    bound2 = (ratios[0] + ratios[1]) * total
    assignment: dict[str, int] = {}
    cum = 0
    for pid in order:
        if cum < bound1:
            assignment[pid] = 0
        elif cum < bound2:
            assignment[pid] = 1
        else:
            assignment[pid] = 2
        cum += counts[pid]

    # On tiny datasets the threshold walk can starve a later split; repair by
    # stealing the last-ordered patient from the most populated split.
    members = {s: [p for p in order if assignment[p] == s] for s in (0, 1, 2)}
    for s in (1, 2):
        while not members[s]:
            donor = max((0, 1, 2), key=lambda k: (len(members[k]), -k))
            moved = members[donor].pop()
            members[s].append(moved)
            assignment[moved] = s

    splits: tuple[list[VolumeRecord], ...] = ([], [], [])
    for rec in manifest:
        splits[assignment[rec.patient_id]].append(rec)
    tags = ("train", "val", "test")
    return tuple(
        DatasetManifest(records, split_tag=tag) for records, tag in zip(splits, tags)
    )


# ---------------------------------------------------------------------------
# Voxel files: little-endian float32, header of three uint32 (n, height, width).


def write_voxels(path: str | Path, voxels: np.ndarray) -> Path:
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise ValueError(f"voxels must be (n_slices, height, width), got shape {voxels.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(voxels, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_VOXEL_HEADER.pack(*voxels.shape))
        fh.write(data.tobytes())
    return path


def read_voxels(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"voxel file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _VOXEL_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    n, h, w = _VOXEL_HEADER.unpack_from(raw)
    expected = _VOXEL_HEADER.size + 4 * n * h * w
    if len(raw) != expected:
        raise ValueError(
            f"{path}: file size {len(raw)} does not match header "
            f"({n}x{h}x{w} slices -> {expected} bytes)"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_VOXEL_HEADER.size)
    return data.reshape(n, h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# B-scan triplets.


@dataclass(frozen=True)
class BscanTriplet:
    """Three adjacent slices of one volume, stacked channel-wise."""

    volume_id: str
    center_index: int
    slices: np.ndarray  # (3, height, width) float32 in [0, 1]

    def __post_init__(self):
        if self.slices.shape[0] != 3 or self.slices.ndim != 3:
            raise ValueError(f"triplet slices must be (3, h, w), got {self.slices.shape}")


def make_bscan_triplets(voxels: np.ndarray, volume_id: str = "") -> list[BscanTriplet]:
    """All triplets of adjacent slices, one per interior slice, in slice order.

    A volume with n slices yields exactly n - 2 triplets. Slices must already
    be normalized to [0, 1].
    """
    voxels = np.asarray(voxels, dtype=np.float32)
    if voxels.ndim != 3:
        raise ValueError(f"voxels must be (n_slices, height, width), got shape {voxels.shape}")
    n = voxels.shape[0]
    if n < MIN_BSCANS:
        raise ValueError(
            f"volume {volume_id or '<anon>'}: {n} slice(s), need >= {MIN_BSCANS} for triplets"
        )
    if float(voxels.min()) < 0.0 or float(voxels.max()) > 1.0:
        raise ValueError(
            f"volume {volume_id or '<anon>'}: slice intensities must lie in [0, 1]"
        )
    return [
        BscanTriplet(volume_id=volume_id, center_index=c, slices=voxels[c - 1 : c + 2])
        for c in range(1, n - 1)
    ]


def triplet_stack(voxels: np.ndarray) -> np.ndarray:
    """Vectorized triplet assembly: (n, h, w) -> (n-2, 3, h, w) float32."""
    voxels = np.asarray(voxels, dtype=np.float32)
    if voxels.ndim != 3 or voxels.shape[0] < MIN_BSCANS:
        raise ValueError(f"need (n>=3, h, w) voxels, got shape {voxels.shape}")
    return np.ascontiguousarray(
        np.stack([voxels[:-2], voxels[1:-1], voxels[2:]], axis=1)
    )
