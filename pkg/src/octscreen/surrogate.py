"""Surrogate visual-field labelling via nearest-neighbour embedding matching.

Volumes split into four groups by class and measured-VF availability. Each
VF-absent volume receives the VF label of its nearest same-class volume with a
measured VF (Euclidean distance between volume embeddings). Volumes that were
themselves labelled this way are never donors and never relabelled, so a
second pass is a no-op.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data_model import GLAUCOMA, DatasetManifest, VolumeRecord
from .embedding import VolumeEmbedding


def euclidean_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"vectors must share one dimension, got {a.shape} and {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


@dataclass(frozen=True)
class GroupPartition:
    """Four disjoint groups: (glaucoma | normal) x (measured VF | not)."""

    g_labeled: tuple[VolumeEmbedding, ...]
    g_unlabeled: tuple[VolumeEmbedding, ...]
    n_labeled: tuple[VolumeEmbedding, ...]
    n_unlabeled: tuple[VolumeEmbedding, ...]

    def counts(self) -> dict[str, int]:
        return {
            "g_labeled": len(self.g_labeled),
            "g_unlabeled": len(self.g_unlabeled),
            "n_labeled": len(self.n_labeled),
            "n_unlabeled": len(self.n_unlabeled),
        }


def partition_groups(
    manifest: DatasetManifest, embeddings: list[VolumeEmbedding]
) -> GroupPartition:
    """Partition every volume by class and measured-VF availability.

    Volumes whose VF came from a previous surrogate pass count as unlabeled
    here (no measured VF) but are not eligible recipients in assignment.
    """
    by_id = {emb.volume_id: emb for emb in embeddings}
    missing = [rec.volume_id for rec in manifest if rec.volume_id not in by_id]
    if missing:
        raise ValueError(
            f"no embedding for volume(s): {', '.join(missing[:5])}"
            + ("..." if len(missing) > 5 else "")
        )
    dims = {emb.vector.shape[0] for emb in by_id.values()}
    if len(dims) > 1:
        raise ValueError(f"embeddings have mixed dimensions {sorted(dims)}")
    groups: dict[tuple[str, bool], list[VolumeEmbedding]] = {
        (GLAUCOMA, True): [],
        (GLAUCOMA, False): [],
        ("normal", True): [],
        ("normal", False): [],
    }
    for rec in manifest:
        groups[(rec.class_label, rec.vf_provenance == "measured")].append(
            by_id[rec.volume_id]
        )
    return GroupPartition(
        g_labeled=tuple(groups[(GLAUCOMA, True)]),
        g_unlabeled=tuple(groups[(GLAUCOMA, False)]),
        n_labeled=tuple(groups[("normal", True)]),
        n_unlabeled=tuple(groups[("normal", False)]),
    )


@dataclass(frozen=True)
class SurrogateAssignment:
    recipient_id: str
    donor_id: str
    distance: float


def _nearest_donor(
    recipient: VolumeEmbedding, donors: list[VolumeEmbedding]
) -> tuple[str, float]:
    matrix = np.stack([d.vector for d in donors])
    dists = np.sqrt(np.sum((matrix - recipient.vector) ** 2, axis=1))
    # Ties break toward the lexicographically smallest donor id.
    best = min(range(len(donors)), key=lambda i: (dists[i], donors[i].volume_id))
    return donors[best].volume_id, float(dists[best])


def assign_surrogates(
    manifest: DatasetManifest, partition: GroupPartition
) -> tuple[list[SurrogateAssignment], DatasetManifest]:
    """Copy VF labels onto VF-absent volumes from nearest same-class donors.

    Returns the assignments (in recipient manifest order) and an updated
    manifest where recipients carry the donor's VF with provenance
    ``surrogate``. Donors are measured-VF volumes only.
    """
    donors = {
        GLAUCOMA: list(partition.g_labeled),
        "normal": list(partition.n_labeled),
    }
    eligible = [rec for rec in manifest if rec.vf_provenance == "absent"]
    for rec in eligible:
        if not donors[rec.class_label]:
            raise ValueError(
                f"volume {rec.volume_id} needs a surrogate but class "
                f"{rec.class_label!r} has no measured-VF volumes"
            )
    recipient_ids = {rec.volume_id for rec in eligible}
    embeddings_by_id = {
        emb.volume_id: emb
        for group in (
            partition.g_labeled,
            partition.g_unlabeled,
            partition.n_labeled,
            partition.n_unlabeled,
        )
        for emb in group
    }

    missing = sorted(recipient_ids - set(embeddings_by_id))
    if missing:
        raise ValueError(f"partition lacks embeddings for recipient(s): {', '.join(missing[:5])}")

    assignments: list[SurrogateAssignment] = []
    new_records: list[VolumeRecord] = []
    by_id = {rec.volume_id: rec for rec in manifest}
    for rec in manifest:
        if rec.volume_id not in recipient_ids:
            new_records.append(rec)
            continue
        donor_id, dist = _nearest_donor(
            embeddings_by_id[rec.volume_id], donors[rec.class_label]
        )
        donor = by_id[donor_id]
        assignments.append(SurrogateAssignment(rec.volume_id, donor_id, dist))
        new_records.append(
            replace(rec, vf=donor.vf, vf_provenance="surrogate")
        )
    return assignments, manifest.with_records(new_records)


def write_assignment_log(path: str | Path, assignments: list[SurrogateAssignment]) -> Path:
    """Audit log: one ``recipient,donor,distance`` line per assignment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["recipient_id,donor_id,distance"]
    lines += [
        f"{a.recipient_id},{a.donor_id},{a.distance:.9g}" for a in assignments
    ]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_assignment_log(path: str | Path) -> list[SurrogateAssignment]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"assignment log not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "recipient_id,donor_id,distance":
        raise ValueError(f"{path}: missing assignment log header")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        out.append(SurrogateAssignment(parts[0], parts[1], float(parts[2])))
    return out
