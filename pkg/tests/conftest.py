"""Shared fixtures: one tiny rendered dataset and small trained models.

Session-scoped so the expensive pieces (rendering, short training runs) happen
once; tests must not mutate them.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import settings

from octscreen.data_model import (
    DatasetManifest,
    VfMeasurement,
    VolumeRecord,
    split_by_patient,
)
from octscreen.embedding import BackboneConfig, embed_volumes, train_backbone
from octscreen.surrogate import assign_surrogates, partition_groups
from octscreen.synthetic import SyntheticSpec, generate_synthetic_dataset
from octscreen.training import TrainConfig, train_mtl

settings.register_profile("deterministic", derandomize=True, max_examples=60)
settings.load_profile("deterministic")

torch.set_num_threads(min(4, torch.get_num_threads()))


def make_record(
    volume_id: str = "V1",
    patient_id: str = "P1",
    eye: str = "left",
    visit_id: str = "T1",
    class_label: str = "glaucoma",
    vf: VfMeasurement | None = VfMeasurement(80.0, -5.0, 3.0),
    vf_provenance: str | None = None,
    bscan_count: int = 8,
    data_path: str = "volumes/V1.bin",
) -> VolumeRecord:
    if vf_provenance is None:
        vf_provenance = "absent" if vf is None else "measured"
    return VolumeRecord(
        volume_id=volume_id,
        patient_id=patient_id,
        eye=eye,
        visit_id=visit_id,
        class_label=class_label,
        vf=vf,
        vf_provenance=vf_provenance,
        bscan_count=bscan_count,
        data_path=data_path,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small rendered dataset with train/val/test splits."""
    root = tmp_path_factory.mktemp("tiny_dataset")
    spec = SyntheticSpec(
        n_patients=10,
        visits_per_patient=(1, 2),
        volumes_per_visit=(1, 2),
        bscans_per_volume=8,
        image_height=32,
        image_width=32,
        glaucoma_prevalence=0.5,
        vf_missing_rate=0.3,
        pixel_noise=0.05,
        structure_function_noise=0.03,
        seed=11,
    )
    manifest = generate_synthetic_dataset(spec, root)
    train, val, test = split_by_patient(manifest, (0.5, 0.25, 0.25), seed=11)
    return {
        "root": root,
        "spec": spec,
        "manifest": manifest,
        "train": train,
        "val": val,
        "test": test,
    }


@pytest.fixture(scope="session")
def tiny_backbone(tiny_dataset):
    cfg = BackboneConfig(
        width=8, n_stages=2, blocks_per_stage=1, feature_dim=16,
        epochs=2, batch_size=64, lr=0.05, seed=11,
    )
    params, history = train_backbone(
        tiny_dataset["train"], cfg, tiny_dataset["root"], tiny_dataset["val"]
    )
    return {"params": params, "history": history, "config": cfg}


@pytest.fixture(scope="session")
def tiny_embeddings(tiny_dataset, tiny_backbone):
    return embed_volumes(
        tiny_backbone["params"], tiny_dataset["train"], tiny_dataset["root"]
    )


@pytest.fixture(scope="session")
def tiny_labeled_train(tiny_dataset, tiny_embeddings):
    partition = partition_groups(tiny_dataset["train"], tiny_embeddings)
    assignments, labeled = assign_surrogates(tiny_dataset["train"], partition)
    return {"assignments": assignments, "manifest": labeled, "partition": partition}


@pytest.fixture(scope="session")
def tiny_mtl(tiny_dataset, tiny_labeled_train):
    cfg = TrainConfig(
        mode="semt", width=8, n_stages=2, blocks_per_stage=1,
        epochs=2, batch_size=32, lr=0.05, seed=11,
    )
    result = train_mtl(
        tiny_labeled_train["manifest"], tiny_dataset["val"], cfg, tiny_dataset["root"]
    )
    return {"result": result, "params": result.params, "config": cfg}


@pytest.fixture()
def rng():
    return np.random.default_rng(42)
