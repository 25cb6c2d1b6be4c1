"""Stage 2: joint training of the classifier and VF regressor on B-scan triplets.

Three run modes share one code path:

- ``single_task``: classification only; the VF mask is forced all-false, so
  regression terms are exact zeros and contribute no gradient.
- ``mt``: classification plus regression where VF labels exist; the mask
  silences regression on VF-absent triplets.
- ``semt``: like ``mt`` but requires every training volume to carry a VF label
  (measured or surrogate), i.e. surrogate labelling must have run first.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from math import fsum
from pathlib import Path

import numpy as np
import torch

from .data_model import (
    DatasetManifest,
    VfMeasurement,
    denormalize_vf,
    normalize_vf,
    read_voxels,
    triplet_stack,
)
from .mtl_model import (
    LossWeights,
    MtlNetwork,
    MtlParams,
    classification_loss,
    regression_loss,
    total_loss,
)
from .utils import TrainingDivergedError, config_hash, new_rng, setup_determinism

MODES = ("single_task", "mt", "semt")

TRAIN_LOG_KEYS = ("epoch", "l_cls", "l_reg_vfi", "l_reg_md", "l_reg_psd", "val_auc", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "semt"
    width: int = 16
    n_stages: int = 3
    blocks_per_stage: int = 1
    reg_channels: int = 0      # 0 -> half the trunk's output channels
    epochs: int = 12
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_step: int = 0
    lr_gamma: float = 0.1
    alpha_vfi: float = 1.0
    alpha_md: float = 1.0
    alpha_psd: float = 1.0
    early_stop_patience: int = 0  # 0 disables early stopping
    seed: int = 0
    deterministic: bool = True

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode={self.mode!r} not in {MODES}")
        if self.width < 1 or self.n_stages < 1 or self.blocks_per_stage < 1:
            raise ValueError("width, n_stages, blocks_per_stage must be >= 1")
        if self.reg_channels < 0:
            raise ValueError(f"reg_channels must be >= 0, got {self.reg_channels}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("alpha_vfi", "alpha_md", "alpha_psd"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")

    def loss_weights(self) -> LossWeights:
        return LossWeights((self.alpha_vfi, self.alpha_md, self.alpha_psd))


@dataclass
class TrainResult:
    params: MtlParams       # weights at the best validation AUC epoch
    log: list[dict]         # one entry per epoch run in this call
    best_epoch: int         # -1 when no epoch improved (or epochs == 0)
    best_val_auc: float | None
    last_state: dict        # resume payload: model/optimizer state, next epoch


def _mode_mask(rec_has_vf: bool, mode: str) -> bool:
    return mode != "single_task" and rec_has_vf


def _train_arrays(manifest: DatasetManifest, data_root: Path, mode: str):
    xs, ys, vfs, masks = [], [], [], []
    shape = None
    for rec in manifest:
        if mode == "semt" and not rec.has_vf:
            raise ValueError(
                f"mode 'semt' requires VF labels on every training volume, but "
                f"{rec.volume_id} has none; run surrogate labelling first"
            )
        voxels = read_voxels(data_root / rec.data_path)
        if shape is None:
            shape = voxels.shape[1:]
        elif voxels.shape[1:] != shape:
            raise ValueError(f"volume {rec.volume_id}: slice shape {voxels.shape[1:]} != {shape}")
        stack = triplet_stack(voxels)
        n = stack.shape[0]
        xs.append(stack)
        ys.append(np.full(n, rec.label, dtype=np.float32))
        if rec.has_vf:
            vf_norm = np.asarray(normalize_vf(rec.vf), dtype=np.float32)
        else:
            vf_norm = np.zeros(3, dtype=np.float32)
        vfs.append(np.tile(vf_norm, (n, 1)))
        masks.append(np.full((n, 3), _mode_mask(rec.has_vf, mode), dtype=bool))
    x = np.concatenate(xs, axis=0)
    return x, np.concatenate(ys), np.concatenate(vfs), np.concatenate(masks), shape


def _load_val_volumes(manifest: DatasetManifest, data_root: Path, shape) -> list[tuple]:
    out = []
    for rec in manifest:
        voxels = read_voxels(data_root / rec.data_path)
        if voxels.shape[1:] != shape:
            raise ValueError(f"volume {rec.volume_id}: slice shape {voxels.shape[1:]} != {shape}")
        out.append((triplet_stack(voxels), rec.label))
    return out


def _predict_stack(model: MtlNetwork, stack: np.ndarray, batch_size: int = 64):
    """Forward all triplets of one volume; returns (probs (n,), vf (n, 3)) float64."""
    was_training = model.training
    model.eval()
    probs, vfs = [], []
    with torch.no_grad():
        for start in range(0, stack.shape[0], batch_size):
            xb = torch.from_numpy(stack[start : start + batch_size])
            out = model(xb)
            probs.append(out.class_prob.double().numpy())
            vfs.append(out.vf_pred.double().numpy())
    model.train(was_training)
    return np.concatenate(probs), np.concatenate(vfs, axis=0)


def predict_volume(
    params: MtlParams, voxels: np.ndarray, batch_size: int = 64
) -> tuple[float, VfMeasurement]:
    """Volume-level prediction: plain means over all adjacent-slice triplets.

    The class probability is the arithmetic mean of the per-triplet sigmoid
    outputs; VF attributes are averaged in normalized space and denormalized.
    Sums use fsum, so results do not depend on enumeration order.
    """
    voxels = np.asarray(voxels, dtype=np.float32)
    if voxels.ndim != 3:
        raise ValueError(f"voxels must be (n, h, w), got shape {voxels.shape}")
    if voxels.shape[1:] != tuple(params.input_hw):
        raise ValueError(
            f"slice shape {voxels.shape[1:]} does not match model input {params.input_hw}"
        )
    stack = triplet_stack(voxels)
    probs, vfs = _predict_stack(params.model, stack, batch_size)
    n = stack.shape[0]
    prob = fsum(float(p) for p in probs) / n
    vf_norm = tuple(fsum(float(v) for v in vfs[:, j]) / n for j in range(3))
    return prob, denormalize_vf(vf_norm)


def train_mtl(
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    config: TrainConfig,
    data_root: str | Path,
    resume_state: dict | None = None,
) -> TrainResult:
    """Optimize the multi-task network; selects the best validation-AUC epoch
    (ties keep the latest such epoch).

    ``config.epochs`` counts epochs run by this call; with ``resume_state``
    the epoch numbering (and permutation stream) continues where it left off.
    """
    # Local import: evaluation depends on predict_volume above.
    from .evaluation import compute_metrics

    config.validate()
    data_root = Path(data_root)
    if len(train_manifest) == 0 or len(val_manifest) == 0:
        raise ValueError("train and val manifests must be non-empty")
    setup_determinism(config.seed, config.deterministic)

    x, y_cls, y_vf, vf_mask, shape = _train_arrays(train_manifest, data_root, config.mode)
    val_volumes = _load_val_volumes(val_manifest, data_root, shape)

    model = MtlNetwork(
        width=config.width,
        n_stages=config.n_stages,
        blocks_per_stage=config.blocks_per_stage,
        reg_channels=config.reg_channels,
    )
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    epoch_offset = 0
    if resume_state is not None:
        model.load_state_dict(resume_state["model_state"])
        optimizer.load_state_dict(resume_state["optimizer_state"])
        epoch_offset = int(resume_state["next_epoch"])

    def epoch_lr(epoch: int) -> float:
        if config.lr_step <= 0:
            return config.lr
        return config.lr * config.lr_gamma ** (epoch // config.lr_step)

    weights = config.loss_weights()
    cfg_hash = config_hash(config)

    def val_metrics():
        probs, labels = [], []
        for stack, label in val_volumes:
            p, _ = _predict_stack(model, stack, config.batch_size)
            probs.append(fsum(float(v) for v in p) / len(p))
            labels.append(label)
        acc, _, auc = compute_metrics(probs, labels)
        return auc, acc

    log: list[dict] = []
    best_auc = -np.inf
    best_epoch = -1
    best_state = copy.deepcopy(model.state_dict())
    since_best = 0
    n = x.shape[0]
    for local_epoch in range(config.epochs):
        epoch = epoch_offset + local_epoch
        model.train()
        lr_now = epoch_lr(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr_now
        perm = new_rng(config.seed, 23, epoch).permutation(n)
        cls_sum, cls_n = 0.0, 0
        reg_sums, reg_ns = np.zeros(3), np.zeros(3, dtype=np.int64)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb = torch.from_numpy(x[idx])
            yb = torch.from_numpy(y_cls[idx])
            vb = torch.from_numpy(y_vf[idx])
            mb = torch.from_numpy(vf_mask[idx])
            optimizer.zero_grad()
            out = model(xb)
            if not bool(torch.isfinite(out.class_prob).all() & torch.isfinite(out.vf_pred).all()):
                raise TrainingDivergedError(
                    f"non-finite network outputs at epoch {epoch} step {start // config.batch_size}"
                )
            l_cls = classification_loss(out.class_prob, yb)
            l_reg = regression_loss(out.vf_pred, vb, mb)
            loss = total_loss(l_cls, l_reg, weights)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {start // config.batch_size}"
                )
            loss.backward()
            optimizer.step()
            cls_sum += float(l_cls.detach()) * len(idx)
            cls_n += len(idx)
            counts = mb.sum(dim=0).numpy()
            reg_sums += l_reg.detach().numpy() * counts
            reg_ns += counts
        val_auc, val_acc = val_metrics()
        entry = {
            "epoch": epoch,
            "l_cls": float(cls_sum / cls_n),
            "l_reg_vfi": float(reg_sums[0] / max(1, reg_ns[0])),
            "l_reg_md": float(reg_sums[1] / max(1, reg_ns[1])),
            "l_reg_psd": float(reg_sums[2] / max(1, reg_ns[2])),
            "val_auc": val_auc,
            "val_acc": val_acc,
        }
        log.append(entry)
        # Ties keep the latest checkpoint (more optimization at equal
        # validation); patience counts strict improvements only.
        improved = val_auc is not None and val_auc > best_auc
        tied = val_auc is not None and best_epoch >= 0 and val_auc == best_auc
        if improved or tied:
            best_auc = val_auc
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        if improved:
            since_best = 0
        else:
            since_best += 1
            if config.early_stop_patience > 0 and since_best >= config.early_stop_patience:
                break

    last_state = {
        "model_state": copy.deepcopy(model.state_dict()),
        "optimizer_state": copy.deepcopy(optimizer.state_dict()),
        "next_epoch": epoch_offset + len(log),
        "config_hash": cfg_hash,
    }
    model.load_state_dict(best_state)
    model.eval()
    params = MtlParams(
        model=model,
        input_hw=tuple(shape),
        config_hash=cfg_hash,
        seed=config.seed,
        mode=config.mode,
    )
    return TrainResult(
        params=params,
        log=log,
        best_epoch=best_epoch,
        best_val_auc=None if best_epoch < 0 else best_auc,
        last_state=last_state,
    )


# ---------------------------------------------------------------------------
# Training log (JSON lines) and resume-state files.


def write_training_log(path: str | Path, entries: list[dict], append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w") as fh:
        for entry in entries:
            missing = [k for k in TRAIN_LOG_KEYS if k not in entry]
            if missing:
                raise ValueError(f"log entry missing key(s): {missing}")
            fh.write(json.dumps({k: entry[k] for k in TRAIN_LOG_KEYS}) + "\n")
    return path


def read_training_log(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"training log not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        entry = json.loads(line)
        missing = [k for k in TRAIN_LOG_KEYS if k not in entry]
        if missing:
            raise ValueError(f"{path}:{lineno}: log entry missing key(s): {missing}")
        entries.append(entry)
    return entries


def save_train_state(state: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    return path


def load_train_state(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"train state not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)
