"""Metrics, case-level aggregation, evaluation reports, class activation maps.

Glaucoma is the positive class everywhere. AUC uses the exact midrank
statistic (ties counted half), which equals brute-force pairwise comparison
bit-for-bit; a single-class label set has no defined AUC and yields None.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import fsum
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data_model import DatasetManifest, read_voxels
from .mtl_model import MtlParams
from .training import predict_volume

GLAUCOMA_LABEL = 1


def _rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Midrank AUC. Numerator (#concordant + 0.5 #ties) is exact in floats."""
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # 1-based midrank of the tie block [i, j]
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    n_pos = int(np.sum(labels == 1))
    n_neg = len(labels) - n_pos
    pos_rank_sum = float(np.sum(ranks[labels == 1]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def compute_metrics(
    probabilities, labels, threshold: float = 0.5
) -> tuple[float, float, float | None]:
    """(accuracy, F1, AUC) with glaucoma positive; AUC is None if one class.

    Predictions are positive when probability >= threshold. F1 is 0 when
    precision + recall is 0.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    if probs.ndim != 1 or probs.shape != y.shape:
        raise ValueError(
            f"probabilities and labels must be matching 1-d sequences, "
            f"got shapes {probs.shape} and {y.shape}"
        )
    if probs.size == 0:
        raise ValueError("cannot compute metrics on an empty set")
    if not np.isfinite(probs).all():
        raise ValueError("non-finite probabilities")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = y.astype(np.int64)

    pred = probs >= threshold
    tp = int(np.sum(pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    accuracy = (tp + tn) / len(y)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0

    auc = None
    if 0 < int(np.sum(y)) < len(y):
        auc = _rank_auc(probs, y)
    return accuracy, f1, auc


def aggregate_case_level(
    manifest: DatasetManifest, probabilities: dict[str, float]
) -> tuple[list[float], list[int], list[tuple[str, str, str]]]:
    """Mean volume probability per (patient, eye, visit) case, sorted by key.

    All volumes of one case must share a class label; disagreement raises.
    """
    groups: dict[tuple[str, str, str], list[float]] = {}
    labels: dict[tuple[str, str, str], int] = {}
    for rec in manifest:
        if rec.volume_id not in probabilities:
            raise ValueError(f"no probability for volume {rec.volume_id}")
        key = rec.case_key
        groups.setdefault(key, []).append(float(probabilities[rec.volume_id]))
        if key in labels and labels[key] != rec.label:
            raise ValueError(
                f"case {key} has volumes with conflicting class labels"
            )
        labels[key] = rec.label
    keys = sorted(groups)
    case_probs = [fsum(groups[k]) / len(groups[k]) for k in keys]
    case_labels = [labels[k] for k in keys]
    return case_probs, case_labels, keys


@dataclass
class MetricsReport:
    image_accuracy: float
    image_f1: float
    image_auc: float | None
    case_accuracy: float
    case_f1: float
    case_auc: float | None
    vf_mae_vfi: float | None
    vf_mae_md: float | None
    vf_mae_psd: float | None
    n_volumes: int
    n_cases: int
    n_glaucoma_volumes: int
    n_normal_volumes: int
    n_glaucoma_cases: int
    n_normal_cases: int

    def to_dict(self) -> dict:
        return {
            "image_level": {
                "accuracy": self.image_accuracy,
                "f1": self.image_f1,
                "auc": self.image_auc,
            },
            "case_level": {
                "accuracy": self.case_accuracy,
                "f1": self.case_f1,
                "auc": self.case_auc,
            },
            "vf_mae": {
                "vfi": self.vf_mae_vfi,
                "md": self.vf_mae_md,
                "psd": self.vf_mae_psd,
            },
            "counts": {
                "volumes": self.n_volumes,
                "cases": self.n_cases,
                "glaucoma_volumes": self.n_glaucoma_volumes,
                "normal_volumes": self.n_normal_volumes,
                "glaucoma_cases": self.n_glaucoma_cases,
                "normal_cases": self.n_normal_cases,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @staticmethod
    def from_dict(data: dict) -> "MetricsReport":
        return MetricsReport(
            image_accuracy=data["image_level"]["accuracy"],
            image_f1=data["image_level"]["f1"],
            image_auc=data["image_level"]["auc"],
            case_accuracy=data["case_level"]["accuracy"],
            case_f1=data["case_level"]["f1"],
            case_auc=data["case_level"]["auc"],
            vf_mae_vfi=data["vf_mae"]["vfi"],
            vf_mae_md=data["vf_mae"]["md"],
            vf_mae_psd=data["vf_mae"]["psd"],
            n_volumes=data["counts"]["volumes"],
            n_cases=data["counts"]["cases"],
            n_glaucoma_volumes=data["counts"]["glaucoma_volumes"],
            n_normal_volumes=data["counts"]["normal_volumes"],
            n_glaucoma_cases=data["counts"]["glaucoma_cases"],
            n_normal_cases=data["counts"]["normal_cases"],
        )


def load_report(path: str | Path) -> MetricsReport:
    with open(path) as fh:
        return MetricsReport.from_dict(json.load(fh))


def evaluate(
    test_manifest: DatasetManifest, params: MtlParams, data_root: str | Path
) -> MetricsReport:
    """Full test-set evaluation: image and case metrics plus VF MAE.

    VF mean absolute error is computed in clinical units against volumes with
    a measured VF only (surrogate or absent labels are never scored).
    """
    if len(test_manifest) == 0:
        raise ValueError("test manifest is empty")
    data_root = Path(data_root)
    probs: dict[str, float] = {}
    vf_preds: dict[str, tuple[float, float, float]] = {}
    labels: list[int] = []
    for rec in test_manifest:
        voxels = read_voxels(data_root / rec.data_path)
        prob, vf = predict_volume(params, voxels)
        probs[rec.volume_id] = prob
        vf_preds[rec.volume_id] = vf.as_tuple()
        labels.append(rec.label)

    image_probs = [probs[rec.volume_id] for rec in test_manifest]
    image_acc, image_f1, image_auc = compute_metrics(image_probs, labels)
    case_probs, case_labels, _ = aggregate_case_level(test_manifest, probs)
    case_acc, case_f1, case_auc = compute_metrics(case_probs, case_labels)

    measured = [rec for rec in test_manifest if rec.vf_provenance == "measured"]
    maes: list[float | None] = [None, None, None]
    if measured:
        for j in range(3):
            errs = [
                abs(vf_preds[rec.volume_id][j] - rec.vf.as_tuple()[j]) for rec in measured
            ]
            maes[j] = fsum(errs) / len(errs)

    n_glaucoma = sum(labels)
    case_glaucoma = sum(case_labels)
    return MetricsReport(
        image_accuracy=image_acc,
        image_f1=image_f1,
        image_auc=image_auc,
        case_accuracy=case_acc,
        case_f1=case_f1,
        case_auc=case_auc,
        vf_mae_vfi=maes[0],
        vf_mae_md=maes[1],
        vf_mae_psd=maes[2],
        n_volumes=len(test_manifest),
        n_cases=len(case_labels),
        n_glaucoma_volumes=n_glaucoma,
        n_normal_volumes=len(labels) - n_glaucoma,
        n_glaucoma_cases=case_glaucoma,
        n_normal_cases=len(case_labels) - case_glaucoma,
    )


# ---------------------------------------------------------------------------
# Class activation maps.


@dataclass(frozen=True)
class CamHeatmap:
    """Per-pixel class evidence at input resolution, scaled to [0, 1]."""

    values: np.ndarray
    volume_id: str = ""
    center_index: int = -1

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"heatmap must be 2-d, got shape {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("heatmap values must lie in [0, 1]")
        object.__setattr__(self, "values", v)


def compute_cam(
    params: MtlParams,
    triplet: np.ndarray,
    class_label: str = "glaucoma",
    volume_id: str = "",
    center_index: int = -1,
) -> CamHeatmap:
    """Class activation map for one triplet.

    Weighs the concatenated pre-pool maps (trunk plus regression branch) by
    the classifier's weights, rectifies, upsamples bilinearly to the input
    size, and scales the maximum to 1 (an all-zero map stays zero).
    For the normal class the weights are negated.
    """
    if class_label not in ("glaucoma", "normal"):
        raise ValueError(f"class_label must be glaucoma or normal, got {class_label!r}")
    triplet = np.asarray(triplet, dtype=np.float32)
    if triplet.shape != (3, *params.input_hw):
        raise ValueError(
            f"triplet shape {triplet.shape} does not match model input (3, {params.input_hw})"
        )
    model = params.model
    was_training = model.training
    model.eval()
    with torch.no_grad():
        _, fused = model.forward_with_maps(torch.from_numpy(triplet[None]))
        weight = model.cls_head.weight[0]  # (C_t + C_r,)
        if class_label == "normal":
            weight = -weight
        cam = torch.relu((weight[None, :, None, None] * fused).sum(dim=1, keepdim=True))
        cam = torch.nn.functional.interpolate(
            cam, size=tuple(params.input_hw), mode="bilinear", align_corners=False
        )[0, 0]
    model.train(was_training)
    cam = cam.double().numpy()
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return CamHeatmap(values=cam, volume_id=volume_id, center_index=center_index)


def save_cam_png(heatmap: CamHeatmap, path: str | Path) -> Path:
    """8-bit grayscale heatmap."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gray = np.round(heatmap.values * 255.0).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path)
    return path


def save_cam_overlay(heatmap: CamHeatmap, slice_image: np.ndarray, path: str | Path) -> Path:
    """Composite: the B-scan in gray with the heatmap blended in red."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = np.clip(np.asarray(slice_image, dtype=np.float64), 0.0, 1.0)
    if base.shape != heatmap.values.shape:
        raise ValueError(
            f"slice shape {base.shape} does not match heatmap {heatmap.values.shape}"
        )
    cam = heatmap.values
    r = np.clip(base * (1.0 - 0.5 * cam) + cam, 0.0, 1.0)
    g = base * (1.0 - 0.5 * cam)
    b = base * (1.0 - 0.5 * cam)
    rgb = np.stack([r, g, b], axis=-1)
    Image.fromarray(np.round(rgb * 255.0).astype(np.uint8), mode="RGB").save(path)
    return path
