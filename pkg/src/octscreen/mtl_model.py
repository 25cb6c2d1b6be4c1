"""Multi-task network: shared trunk, VF regression branch, fused classifier.

The trunk consumes three adjacent B-scans as channels. The regression branch
refines trunk maps through two 3x3 conv + BN + ReLU layers, pools, and predicts
the three normalized VF attributes through per-attribute sigmoid heads. The
classifier head sees the channel concatenation of trunk maps and regression
maps, pooled, through a single sigmoid unit, so VF structure feeds the class
decision and the class activation map spans both sources.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import chain
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .nets import ConvTrunk, conv3x3, global_avg_pool

PROB_EPS = 1e-7  # clamp for log arguments in the classification loss

VF_ATTRIBUTES = ("vfi", "md", "psd")


@dataclass(frozen=True)
class LossWeights:
    """Per-attribute weights for the regression terms in the total loss."""

    alpha: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.alpha) != 3:
            raise ValueError(f"need 3 weights, got {len(self.alpha)}")
        if any(not np.isfinite(a) or a < 0 for a in self.alpha):
            raise ValueError(f"weights must be finite and >= 0, got {self.alpha}")


@dataclass
class MtlOutput:
    class_prob: Tensor        # (B,), sigmoid probability of glaucoma
    vf_pred: Tensor           # (B, 3), normalized VF predictions in (0, 1)
    reg_feature_maps: Tensor  # (B, C_r, H', W'), pre-pool regression maps


class MtlNetwork(nn.Module):
    def __init__(
        self,
        width: int = 16,
        n_stages: int = 3,
        blocks_per_stage: int = 1,
        reg_channels: int = 0,
        in_channels: int = 3,
    ):
        super().__init__()
        self.trunk = ConvTrunk(in_channels, width, n_stages, blocks_per_stage)
        c_t = self.trunk.out_channels
        c_r = reg_channels if reg_channels > 0 else max(1, c_t // 2)
        self.reg_convs = nn.Sequential(
            conv3x3(c_t, c_r), nn.BatchNorm2d(c_r), nn.ReLU(inplace=True),
            conv3x3(c_r, c_r), nn.BatchNorm2d(c_r), nn.ReLU(inplace=True),
        )
        self.reg_heads = nn.ModuleList(nn.Linear(c_r, 1) for _ in VF_ATTRIBUTES)
        self.cls_head = nn.Linear(c_t + c_r, 1)
        self.trunk_channels = c_t
        self.reg_channels_out = c_r
        self.arch = {
            "width": width,
            "n_stages": n_stages,
            "blocks_per_stage": blocks_per_stage,
            "reg_channels": c_r,
            "in_channels": in_channels,
        }

    def forward_with_maps(self, x: Tensor) -> tuple[MtlOutput, Tensor]:
        """Returns the output plus the concatenated pre-pool maps (for CAM)."""
        trunk_maps = self.trunk(x)
        reg_maps = self.reg_convs(trunk_maps)
        fused = torch.cat([trunk_maps, reg_maps], dim=1)
        reg_pooled = global_avg_pool(reg_maps)
        vf_pred = torch.sigmoid(
            torch.cat([head(reg_pooled) for head in self.reg_heads], dim=1)
        )
        class_prob = torch.sigmoid(self.cls_head(global_avg_pool(fused))).squeeze(-1)
        return MtlOutput(class_prob, vf_pred, reg_maps), fused

    def forward(self, x: Tensor) -> MtlOutput:
        return self.forward_with_maps(x)[0]

    # Parameter groups are disjoint and jointly exhaustive.
    def trunk_parameters(self) -> list[nn.Parameter]:
        return list(self.trunk.parameters())

    def regression_parameters(self) -> list[nn.Parameter]:
        return list(chain(self.reg_convs.parameters(), self.reg_heads.parameters()))

    def classification_parameters(self) -> list[nn.Parameter]:
        return list(self.cls_head.parameters())


@dataclass
class MtlParams:
    model: MtlNetwork
    input_hw: tuple[int, int]
    config_hash: str
    seed: int
    mode: str = "semt"


# ---------------------------------------------------------------------------
# Losses. All dtype-preserving: float64 inputs give float64 losses.


def regression_loss(vf_pred: Tensor, vf_target: Tensor, mask: Tensor) -> Tensor:
    """Per-attribute masked mean squared error, shape (3,).

    Each attribute averages squared error over its masked-in rows only; an
    attribute with no masked-in rows contributes an exact constant zero (no
    gradient path), so a fully masked batch yields (0, 0, 0).
    """
    if vf_pred.shape != vf_target.shape or vf_pred.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(vf_pred.shape)}, target {tuple(vf_target.shape)}, "
            f"mask {tuple(mask.shape)}"
        )
    if vf_pred.ndim != 2 or vf_pred.shape[1] != 3:
        raise ValueError(f"expected (batch, 3) tensors, got {tuple(vf_pred.shape)}")
    if mask.dtype != torch.bool:
        raise ValueError(f"mask must be boolean, got {mask.dtype}")
    if not torch.isfinite(vf_pred).all():
        raise ValueError("non-finite values in vf_pred")
    terms = []
    for j in range(3):
        sel = mask[:, j]
        if not bool(sel.any()):
            terms.append(vf_pred.new_zeros(()))
            continue
        target_j = vf_target[sel, j]
        if not torch.isfinite(target_j).all():
            raise ValueError(f"non-finite masked-in targets for attribute {VF_ATTRIBUTES[j]}")
        diff = vf_pred[sel, j] - target_j
        terms.append((diff**2).mean())
    return torch.stack(terms)


def classification_loss(class_prob: Tensor, labels: Tensor, eps: float = PROB_EPS) -> Tensor:
    """Two-term binary cross-entropy on probabilities, clamped away from {0, 1}."""
    if class_prob.shape != labels.shape or class_prob.ndim != 1:
        raise ValueError(
            f"expected matching 1-d tensors, got {tuple(class_prob.shape)} and {tuple(labels.shape)}"
        )
    if class_prob.numel() == 0:
        raise ValueError("empty batch")
    if not torch.isfinite(class_prob).all():
        raise ValueError("non-finite values in class_prob")
    if not bool(((labels == 0) | (labels == 1)).all()):
        raise ValueError("labels must be 0 or 1")
    p = class_prob.clamp(eps, 1.0 - eps)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def total_loss(l_cls: Tensor, l_reg: Tensor, weights: LossWeights) -> Tensor:
    """l_cls + sum_j alpha_j * l_reg_j."""
    if l_reg.shape != (3,):
        raise ValueError(f"l_reg must have shape (3,), got {tuple(l_reg.shape)}")
    alpha = torch.as_tensor(weights.alpha, dtype=l_reg.dtype, device=l_reg.device)
    out = l_cls + (alpha * l_reg).sum()
    if not torch.isfinite(out.detach()):
        raise ValueError("non-finite total loss")
    return out


# ---------------------------------------------------------------------------
# Checkpoints: one blob with the three parameter groups separately addressable,
# plus a plain-text sidecar.


def save_mtl(params: MtlParams, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = params.model
    blob = {
        "kind": "mtl",
        "arch": dict(model.arch),
        "trunk_state": model.trunk.state_dict(),
        "regression_state": {
            "convs": model.reg_convs.state_dict(),
            "heads": model.reg_heads.state_dict(),
        },
        "classifier_state": model.cls_head.state_dict(),
        "input_hw": tuple(params.input_hw),
        "config_hash": params.config_hash,
        "seed": params.seed,
        "mode": params.mode,
    }
    torch.save(blob, path)
    sidecar = path.with_name(path.name + ".meta")
    sidecar.write_text(
        f"mode={params.mode}\n"
        f"input_height={params.input_hw[0]}\n"
        f"input_width={params.input_hw[1]}\n"
        f"config_hash={params.config_hash}\n"
        f"seed={params.seed}\n"
    )
    return path


def load_mtl(path: str | Path) -> MtlParams:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "mtl":
        raise ValueError(f"{path}: not a multi-task checkpoint")
    arch = blob["arch"]
    model = MtlNetwork(
        width=arch["width"],
        n_stages=arch["n_stages"],
        blocks_per_stage=arch["blocks_per_stage"],
        reg_channels=arch["reg_channels"],
        in_channels=arch["in_channels"],
    )
    model.trunk.load_state_dict(blob["trunk_state"])
    model.reg_convs.load_state_dict(blob["regression_state"]["convs"])
    model.reg_heads.load_state_dict(blob["regression_state"]["heads"])
    model.cls_head.load_state_dict(blob["classifier_state"])
    model.eval()
    return MtlParams(
        model=model,
        input_hw=tuple(blob["input_hw"]),
        config_hash=blob["config_hash"],
        seed=blob["seed"],
        mode=blob.get("mode", "semt"),
    )
