"""Residual convolutional backbone shared by the detector and the ROI classifier."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

RESNET18_BLOCKS = (2, 2, 2, 2)
RESNET34_BLOCKS = (3, 4, 6, 3)
RESNET_WIDTHS = (64, 128, 256, 512)


@dataclass(frozen=True)
class BackboneConfig:
    blocks: tuple[int, ...] = RESNET18_BLOCKS
    widths: tuple[int, ...] = RESNET_WIDTHS
    stem_width: int = 64
    in_channels: int = 1

    def header(self) -> dict:
        return {"blocks": list(self.blocks), "widths": list(self.widths),
                "stem_width": self.stem_width, "in_channels": self.in_channels}


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        idt = x if self.down is None else self.down(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + idt)


class ResNet(nn.Module):
    """ResNet trunk (7x7 stem, max-pool, four stages) returning C2..C5.

    ``blocks=(3, 4, 6, 3)`` with the default widths is ResNet-34,
    ``(2, 2, 2, 2)`` is ResNet-18.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, cfg.stem_width, 7, 2, 3, bias=False),
            nn.BatchNorm2d(cfg.stem_width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        stages = []
        cin = cfg.stem_width
        for i, (n, w) in enumerate(zip(cfg.blocks, cfg.widths)):
            layers = [BasicBlock(cin, w, 1 if i == 0 else 2)]
            layers += [BasicBlock(w, w) for _ in range(n - 1)]
            stages.append(nn.Sequential(*layers))
            cin = w
        self.stages = nn.ModuleList(stages)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    @property
    def out_channels(self) -> tuple[int, ...]:
        return tuple(self.cfg.widths)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[1] != self.cfg.in_channels:
            # grayscale replicated to the expected channel count
            x = x.expand(-1, self.cfg.in_channels, -1, -1)
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats
