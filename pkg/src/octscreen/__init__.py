"""Glaucoma screening from OCT volumes.

Two-stage pipeline: (1) a slice-level CNN embeds B-scans, embeddings are pooled
per volume and used to copy visual-field labels from nearest same-class
neighbours onto unlabeled volumes; (2) a multi-task CNN is trained on adjacent
B-scan triplets to classify glaucoma and regress the visual-field indices.
"""

__version__ = "0.1.0"

from .data_model import (
    DatasetManifest,
    VfMeasurement,
    VolumeRecord,
    load_manifest,
    save_manifest,
    split_by_patient,
)

__all__ = [
    "DatasetManifest",
    "VfMeasurement",
    "VolumeRecord",
    "load_manifest",
    "save_manifest",
    "split_by_patient",
    "__version__",
]
