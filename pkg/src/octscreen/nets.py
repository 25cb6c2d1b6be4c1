"""Convolutional building blocks shared by the slice backbone and the MTL model."""

from __future__ import annotations

import torch
from torch import Tensor, nn


def conv3x3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1, bias=False)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = conv3x3(in_ch, out_ch, stride)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = conv3x3(out_ch, out_ch)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.skip(x))


class ConvTrunk(nn.Module):
    """Stem plus ``n_stages`` residual stages; width doubles and resolution
    halves at each stage after the first."""

    def __init__(self, in_channels: int, width: int, n_stages: int, blocks_per_stage: int = 1):
        super().__init__()
        if width < 1 or n_stages < 1 or blocks_per_stage < 1:
            raise ValueError("width, n_stages and blocks_per_stage must be >= 1")
        self.stem = nn.Sequential(
            conv3x3(in_channels, width), nn.BatchNorm2d(width), nn.ReLU(inplace=True)
        )
        stages = []
        ch = width
        for stage in range(n_stages):
            out_ch = width * (2**stage)
            for block in range(blocks_per_stage):
                stride = 2 if stage > 0 and block == 0 else 1
                stages.append(ResidualBlock(ch, out_ch, stride))
                ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.out_channels = ch

    def forward(self, x: Tensor) -> Tensor:
        return self.stages(self.stem(x))


def global_avg_pool(maps: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    return maps.mean(dim=(2, 3))
