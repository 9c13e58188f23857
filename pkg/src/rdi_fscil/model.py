"""Backbones and the cosine-classifier math: logits, cross-entropy, prediction.

Feature maps are channel-last (h, w, d) at the module boundary regardless of
the conv-internal layout.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Union

import torch
from torch import nn

from .core import (
    NORM_EPS,
    CosineClassifier,
    DegenerateFeatureError,
    FeatureMap,
    PooledFeature,
    PoolSource,
)


class Backbone(nn.Module):
    """Base class: forward maps (B, C, H, W) images to (B, h, w, d) feature maps."""

    arch_id: str = "backbone"

    def output_geometry(self, input_size: int, in_channels: Optional[int] = None) -> tuple[int, int, int]:
        """(h, w, d) for a square input, traced with a dry forward."""
        c = in_channels if in_channels is not None else self.in_channels
        with torch.no_grad():
            out = self.forward(torch.zeros(1, c, input_size, input_size))
        return tuple(out.shape[1:])


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(inplace=True),
    )


class SmallConv4(Backbone):
    """Desk-scale 4-block conv net; 32x32 inputs give a 4x4x64 feature map.

    GroupNorm keeps behavior identical in train and eval mode, which makes
    full-run determinism and finite-difference checks straightforward.
    """

    arch_id = "small-conv-4"

    def __init__(self, in_channels: int = 1, width: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.feature_dim = width
        self.blocks = nn.Sequential(
            _conv_block(in_channels, width // 2, stride=2),
            _conv_block(width // 2, width, stride=2),
            _conv_block(width, width, stride=2),
            _conv_block(width, width, stride=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x).permute(0, 2, 3, 1)


class TileConv4(Backbone):
    """Desk-scale conv net whose cells have a receptive field of exactly 8x8
    pixels: three 2x2/stride-2 blocks and one 1x1 block, so each feature-map
    cell sees one image tile and nothing else. That makes per-patch cosine
    scores a clean function of the tile content, which is what the planted
    region diagnostics measure; 32x32 inputs give a 4x4x64 feature map.
    """

    arch_id = "tile-conv-4"

    def __init__(self, in_channels: int = 1, width: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.feature_dim = width

        def block(cin: int, cout: int, k: int, stride: int) -> nn.Sequential:
            return nn.Sequential(
                nn.Conv2d(cin, cout, kernel_size=k, stride=stride, bias=False),
                nn.GroupNorm(min(8, cout), cout),
                nn.ReLU(inplace=True),
            )

        self.blocks = nn.Sequential(
            block(in_channels, width // 2, k=2, stride=2),
            block(width // 2, width, k=2, stride=2),
            block(width, width, k=2, stride=2),
            block(width, width, k=1, stride=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x).permute(0, 2, 3, 1)


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.convs = nn.Sequential(
            _conv_block(cin, cout, stride=1),
            _conv_block(cout, cout, stride=1),
            nn.Conv2d(cout, cout, kernel_size=3, stride=1, padding=1, bias=False),
            nn.GroupNorm(min(8, cout), cout),
        )
        self.shortcut = nn.Sequential(
            nn.Conv2d(cin, cout, kernel_size=1, bias=False),
            nn.GroupNorm(min(8, cout), cout),
        )
        self.relu = nn.ReLU(inplace=True)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.relu(self.convs(x) + self.shortcut(x)))


class ResNet12(Backbone):
    """Four residual stages with 2x pooling each; d=640."""

    arch_id = "resnet12"

    def __init__(self, in_channels: int = 3):
        super().__init__()
        self.in_channels = in_channels
        channels = (64, 160, 320, 640)
        self.feature_dim = channels[-1]
        stages = []
        cin = in_channels
        for cout in channels:
            stages.append(_ResBlock(cin, cout))
            cin = cout
        self.stages = nn.Sequential(*stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x).permute(0, 2, 3, 1)


class ResNet18(Backbone):
    """torchvision resnet18 trunk (no pretrained weights), cut before pooling."""

    arch_id = "resnet18"

    def __init__(self, in_channels: int = 3):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
        self.in_channels = in_channels
        self.feature_dim = 512
        self.trunk = nn.Sequential(*list(net.children())[:-2])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x).permute(0, 2, 3, 1)


_ARCHS = {
    SmallConv4.arch_id: SmallConv4,
    TileConv4.arch_id: TileConv4,
    ResNet12.arch_id: ResNet12,
    ResNet18.arch_id: ResNet18,
}


def build_backbone(arch_id: str, in_channels: int) -> Backbone:
    if arch_id not in _ARCHS:
        raise ValueError(f"unknown architecture {arch_id!r}; known: {sorted(_ARCHS)}")
    return _ARCHS[arch_id](in_channels=in_channels)


def forward_feature_map(backbone: Backbone, image: torch.Tensor) -> FeatureMap:
    """Run one image through the backbone.

    Accepts (H, W) or (C, H, W); returns the channel-last feature map.
    """
    if image.dim() == 2:
        image = image.unsqueeze(0)
    if image.dim() != 3:
        raise ValueError(f"expected (H, W) or (C, H, W) image, got shape {tuple(image.shape)}")
    if image.shape[0] != backbone.in_channels:
        raise ValueError(
            f"image has {image.shape[0]} channels, backbone expects {backbone.in_channels}"
        )
    out = backbone(image.unsqueeze(0))[0]
    return FeatureMap(values=out)


def global_pool(fmap: FeatureMap) -> PooledFeature:
    """Mean over all spatial cells."""
    vec = fmap.values.mean(dim=(0, 1))
    return PooledFeature(vector=vec, source_mask_kind=PoolSource.NONE,
                         support_count=fmap.h * fmap.w)


def _as_vector(feature: Union[PooledFeature, torch.Tensor]) -> torch.Tensor:
    return feature.vector if isinstance(feature, PooledFeature) else feature


def cosine_logits(classifier: CosineClassifier,
                  feature: Union[PooledFeature, torch.Tensor]) -> torch.Tensor:
    """Temperature-scaled cosines between the feature and every weight column."""
    vec = _as_vector(feature)
    if vec.shape[0] != classifier.d:
        raise ValueError(f"feature dim {vec.shape[0]} != classifier dim {classifier.d}")
    if float(vec.detach().norm()) == 0.0:
        raise DegenerateFeatureError("degenerate feature: zero vector has no direction")
    f = vec / (vec.norm() + NORM_EPS)
    return classifier.temperature * (classifier.normalized_weight().t() @ f)


def cross_entropy_cosine(classifier: CosineClassifier,
                         feature: Union[PooledFeature, torch.Tensor],
                         label: int,
                         columns: Optional[slice] = None) -> torch.Tensor:
    """Softmax cross-entropy over cosine logits; `columns` restricts the
    denominator (used to score against base columns only)."""
    logits = cosine_logits(classifier, feature)
    if columns is not None:
        logits = logits[columns]
    if not (0 <= label < logits.shape[0]):
        raise ValueError(f"label {label} out of range for {logits.shape[0]} columns")
    return torch.nn.functional.cross_entropy(
        logits.unsqueeze(0), torch.tensor([label], device=logits.device)
    )


def predict(classifier: CosineClassifier,
            feature: Union[PooledFeature, torch.Tensor]) -> int:
    """Argmax over real-class cosines; the dummy column is never predicted.
    Ties break toward the smallest class id."""
    logits = cosine_logits(classifier, feature)
    if classifier.dummy_index is not None:
        logits = logits[: classifier.dummy_index]
    top = logits.max()
    return int((logits == top).nonzero(as_tuple=False)[0].item())


def batched_predict(classifier: CosineClassifier, features: torch.Tensor,
                    allowed: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Full-space (dummy-free) predictions for a (B, d) batch; `allowed`
    optionally restricts the argmax to a tensor of column indices."""
    logits = classifier.batched_logits(features)
    if classifier.dummy_index is not None:
        logits = logits[:, : classifier.dummy_index]
    if allowed is not None:
        restricted = logits[:, allowed]
        return allowed[restricted.argmax(dim=1)]
    return logits.argmax(dim=1)


def save_checkpoint(path: Path, backbone: Backbone, classifier: CosineClassifier,
                    extra: Optional[dict] = None) -> None:
    """Parameter blobs plus a JSON header describing the architecture."""
    path = Path(path)
    header = {
        "arch_id": backbone.arch_id,
        "in_channels": backbone.in_channels,
        "feature_dim": backbone.feature_dim,
        "temperature": classifier.temperature,
        "num_columns": classifier.num_columns,
        "dummy_index": classifier.dummy_index,
    }
    if extra:
        header.update(extra)
    torch.save(
        {"header": header, "backbone": backbone.state_dict(), "classifier": classifier.state_dict()},
        path,
    )
    with open(path.with_suffix(".json"), "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)


def load_checkpoint(path: Path) -> tuple[Backbone, CosineClassifier, dict]:
    blob = torch.load(Path(path), weights_only=True)
    header = blob["header"]
    backbone = build_backbone(header["arch_id"], header["in_channels"])
    backbone.load_state_dict(blob["backbone"])
    classifier = CosineClassifier(
        weight=blob["classifier"]["weight"],
        temperature=header["temperature"],
        dummy_index=header["dummy_index"],
    )
    return backbone, classifier, header
