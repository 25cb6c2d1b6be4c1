"""Stage 1: slice-level representation learning and volume embeddings.

A small residual CNN is trained to classify single B-scans with the volume's
class label. Per-slice features are the globally averaged activations of a
1x1-projected final map (ReLU'd, so features are nonnegative), and a volume
embedding is the cube-root-of-sum-of-cubes pool over its slices.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .data_model import DatasetManifest, read_voxels
from .nets import ConvTrunk, global_avg_pool
from .utils import TrainingDivergedError, config_hash, new_rng, setup_determinism

_CACHE_MAGIC = b"OEMB"
_CACHE_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture and optimization knobs for the slice classifier."""

    width: int = 16
    n_stages: int = 3
    blocks_per_stage: int = 1
    feature_dim: int = 512
    epochs: int = 8
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_step: int = 0      # 0 disables step decay
    lr_gamma: float = 0.1
    val_fraction: float = 0.2
    seed: int = 0
    deterministic: bool = True

    def validate(self) -> None:
        if self.width < 1 or self.n_stages < 1 or self.blocks_per_stage < 1:
            raise ValueError("width, n_stages, blocks_per_stage must be >= 1")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")


class SliceClassifier(nn.Module):
    """Trunk -> 1x1 projection to feature_dim -> GAP -> linear binary head."""

    def __init__(self, width: int, n_stages: int, blocks_per_stage: int, feature_dim: int):
        super().__init__()
        self.trunk = ConvTrunk(1, width, n_stages, blocks_per_stage)
        self.proj = nn.Sequential(
            nn.Conv2d(self.trunk.out_channels, feature_dim, kernel_size=1, bias=False),
            nn.BatchNorm2d(feature_dim),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Linear(feature_dim, 1)
        self.feature_dim = feature_dim

    def features(self, x: Tensor) -> Tensor:
        """(B, 1, H, W) -> (B, feature_dim), nonnegative."""
        return global_avg_pool(self.proj(self.trunk(x)))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x)).squeeze(-1)


@dataclass
class BackboneParams:
    model: SliceClassifier
    feature_dim: int
    input_hw: tuple[int, int]
    config_hash: str
    seed: int


def _slice_arrays(
    manifest: DatasetManifest, data_root: Path
) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    xs, ys = [], []
    shape = None
    for rec in manifest:
        voxels = read_voxels(data_root / rec.data_path)
        if shape is None:
            shape = voxels.shape[1:]
        elif voxels.shape[1:] != shape:
            raise ValueError(
                f"volume {rec.volume_id}: slice shape {voxels.shape[1:]} != {shape}"
            )
        xs.append(voxels[:, None, :, :])
        ys.append(np.full(voxels.shape[0], rec.label, dtype=np.float32))
    x = np.concatenate(xs, axis=0)
    y = np.concatenate(ys, axis=0)
    return x, y, shape


def _holdout_by_patient(
    manifest: DatasetManifest, fraction: float, seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Carve a patient-disjoint validation subset of roughly ``fraction`` volumes."""
    patients = sorted({rec.patient_id for rec in manifest})
    if len(patients) < 2:
        raise ValueError("need at least two patients to carve a validation split")
    counts: dict[str, int] = {}
    for rec in manifest:
        counts[rec.patient_id] = counts.get(rec.patient_id, 0) + 1
    rng = new_rng(seed, 91)
    order = [patients[i] for i in rng.permutation(len(patients))]
    bound = (1.0 - fraction) * len(manifest)
    fit_ids, cum = set(), 0
    for pid in order:
        if cum < bound:
            fit_ids.add(pid)
        cum += counts[pid]
    if len(fit_ids) == len(patients):  # guarantee a non-empty holdout
        fit_ids.discard(order[-1])
    fit = [r for r in manifest if r.patient_id in fit_ids]
    held = [r for r in manifest if r.patient_id not in fit_ids]
    return DatasetManifest(fit, split_tag="train"), DatasetManifest(held, split_tag="val")


def _mean_bce(model: SliceClassifier, x: np.ndarray, y: np.ndarray, batch: int) -> float:
    crit = nn.BCEWithLogitsLoss(reduction="sum")
    total, n = 0.0, x.shape[0]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, n, batch):
            xb = torch.from_numpy(x[start : start + batch])
            yb = torch.from_numpy(y[start : start + batch])
            total += float(crit(model(xb), yb))
    model.train(was_training)
    return total / n


def train_backbone(
    train_manifest: DatasetManifest,
    config: BackboneConfig,
    data_root: str | Path,
    val_manifest: DatasetManifest | None = None,
) -> tuple[BackboneParams, list[dict]]:
    """Fit the slice classifier; returns the epoch with best validation loss.

    Deterministic given (config, data): same seed and data reproduce the loss
    trace exactly under deterministic kernels. Non-finite losses abort.
    """
    config.validate()
    data_root = Path(data_root)
    if len(train_manifest) == 0:
        raise ValueError("training manifest is empty")
    if val_manifest is None:
        train_manifest, val_manifest = _holdout_by_patient(
            train_manifest, config.val_fraction, config.seed
        )
    labels = {rec.class_label for rec in train_manifest}
    if len(labels) < 2:
        raise ValueError(f"training volumes contain a single class {labels}; need both")

    setup_determinism(config.seed, config.deterministic)
    x_train, y_train, hw = _slice_arrays(train_manifest, data_root)
    x_val, y_val, hw_val = _slice_arrays(val_manifest, data_root)
    if hw_val != hw:
        raise ValueError(f"validation slice shape {hw_val} != training shape {hw}")

    model = SliceClassifier(
        config.width, config.n_stages, config.blocks_per_stage, config.feature_dim
    )
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    scheduler = None
    if config.lr_step > 0:
        scheduler = torch.optim.lr_scheduler.StepLR(
            optimizer, step_size=config.lr_step, gamma=config.lr_gamma
        )
    criterion = nn.BCEWithLogitsLoss()
    shuffle = new_rng(config.seed, 17)

    history: list[dict] = []
    best_loss, best_state = float("inf"), copy.deepcopy(model.state_dict())
    n = x_train.shape[0]
    for epoch in range(config.epochs):
        model.train()
        perm = shuffle.permutation(n)
        running, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb = torch.from_numpy(x_train[idx])
            yb = torch.from_numpy(y_train[idx])
            optimizer.zero_grad()
            loss = criterion(model(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {start // config.batch_size}"
                )
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * len(idx)
            seen += len(idx)
        if scheduler is not None:
            scheduler.step()
        val_loss = _mean_bce(model, x_val, y_val, config.batch_size)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.append(
            {"epoch": epoch, "train_loss": running / seen, "val_loss": val_loss}
        )
        if val_loss < best_loss:
            best_loss, best_state = val_loss, copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    params = BackboneParams(
        model=model,
        feature_dim=config.feature_dim,
        input_hw=hw,
        config_hash=config_hash(config),
        seed=config.seed,
    )
    return params, history


# ---------------------------------------------------------------------------
# Feature extraction and pooling.


def extract_bscan_features(
    params: BackboneParams, voxels: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Per-slice feature matrix (n_slices, feature_dim) for one volume."""
    voxels = np.asarray(voxels, dtype=np.float32)
    if voxels.ndim != 3:
        raise ValueError(f"voxels must be (n, h, w), got shape {voxels.shape}")
    if voxels.shape[1:] != tuple(params.input_hw):
        raise ValueError(
            f"slice shape {voxels.shape[1:]} does not match backbone input {params.input_hw}"
        )
    model = params.model
    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, voxels.shape[0], batch_size):
            xb = torch.from_numpy(voxels[start : start + batch_size, None])
            chunks.append(model.features(xb).numpy())
    model.train(was_training)
    return np.concatenate(chunks, axis=0)


def pool_norm3(features) -> np.ndarray:
    """Pool per-slice features into one vector: cbrt of the sum of cubes.

    Exactly permutation invariant (cubes are sorted per dimension before
    summing) and exactly the identity for a single slice.
    """
    try:
        f = np.asarray(features, dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"ragged feature list: {exc}") from exc
    if f.ndim != 2:
        raise ValueError(f"expected (n_slices, dim) features, got shape {f.shape}")
    if f.shape[0] == 0:
        raise ValueError("cannot pool an empty feature list")
    if f.shape[0] == 1:
        return f[0].copy()
    cubes = np.sort(f**3, axis=0)
    return np.cbrt(np.sum(cubes, axis=0))


@dataclass(frozen=True)
class VolumeEmbedding:
    volume_id: str
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1 or vec.shape[0] == 0:
            raise ValueError(f"embedding must be a non-empty vector, got shape {vec.shape}")
        object.__setattr__(self, "vector", vec)


def embed_volumes(
    params: BackboneParams,
    manifest: DatasetManifest,
    data_root: str | Path,
    batch_size: int = 256,
) -> list[VolumeEmbedding]:
    """Pooled embedding for every volume in manifest order."""
    data_root = Path(data_root)
    out = []
    for rec in manifest:
        voxels = read_voxels(data_root / rec.data_path)
        feats = extract_bscan_features(params, voxels, batch_size)
        out.append(VolumeEmbedding(rec.volume_id, pool_norm3(feats)))
    return out


# ---------------------------------------------------------------------------
# Checkpoint and feature-cache files.


def save_backbone(params: BackboneParams, path: str | Path) -> Path:
    """Write the checkpoint blob plus a human-readable .meta sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "kind": "slice_backbone",
        "state_dict": params.model.state_dict(),
        "arch": _arch_fields(params.model),
        "input_hw": tuple(params.input_hw),
        "config_hash": params.config_hash,
        "seed": params.seed,
    }
    torch.save(blob, path)
    sidecar = path.with_name(path.name + ".meta")
    sidecar.write_text(
        f"feature_dim={params.feature_dim}\n"
        f"input_height={params.input_hw[0]}\n"
        f"input_width={params.input_hw[1]}\n"
        f"config_hash={params.config_hash}\n"
        f"seed={params.seed}\n"
    )
    return path


def _arch_fields(model: SliceClassifier) -> dict:
    trunk = model.trunk
    n_blocks = len(trunk.stages)
    width = trunk.stem[0].out_channels
    # out_channels = width * 2**(n_stages-1); invert
    n_stages = int(np.log2(trunk.out_channels // width)) + 1
    return {
        "width": width,
        "n_stages": n_stages,
        "blocks_per_stage": n_blocks // n_stages,
        "feature_dim": model.feature_dim,
    }


def load_backbone(path: str | Path) -> BackboneParams:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "slice_backbone":
        raise ValueError(f"{path}: not a slice-backbone checkpoint")
    arch = blob["arch"]
    model = SliceClassifier(
        arch["width"], arch["n_stages"], arch["blocks_per_stage"], arch["feature_dim"]
    )
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return BackboneParams(
        model=model,
        feature_dim=arch["feature_dim"],
        input_hw=tuple(blob["input_hw"]),
        config_hash=blob["config_hash"],
        seed=blob["seed"],
    )


def write_feature_cache(
    path: str | Path, embeddings: list[VolumeEmbedding], checkpoint_hash: str
) -> Path:
    """Binary cache of volume embeddings keyed by the producing checkpoint hash."""
    if len(checkpoint_hash) != 64:
        raise ValueError("checkpoint_hash must be a sha256 hex digest")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<I", _CACHE_VERSION))
        fh.write(checkpoint_hash.encode("ascii"))
        fh.write(struct.pack("<I", len(embeddings)))
        for emb in embeddings:
            vid = emb.volume_id.encode("utf-8")
            vec = np.ascontiguousarray(emb.vector, dtype="<f4")
            fh.write(struct.pack("<I", len(vid)))
            fh.write(vid)
            fh.write(struct.pack("<I", vec.shape[0]))
            fh.write(vec.tobytes())
    return path


def read_feature_cache(path: str | Path) -> tuple[list[VolumeEmbedding], str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"feature cache not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != _CACHE_MAGIC:
        raise ValueError(f"{path}: not a feature cache")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    checkpoint_hash = raw[8:72].decode("ascii")
    (count,) = struct.unpack_from("<I", raw, 72)
    offset = 76
    embeddings = []
    for _ in range(count):
        (id_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        vid = raw[offset : offset + id_len].decode("utf-8")
        offset += id_len
        (dim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset).astype(np.float64)
        offset += 4 * dim
        embeddings.append(VolumeEmbedding(vid, vec))
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after {count} records")
    return embeddings, checkpoint_hash
