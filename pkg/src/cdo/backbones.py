"""Backbone construction and multi-hierarchy feature tapping.

Every backbone exposes an ordered list of feature stages; the expert and
apprentice wrap the same architecture and tap the same hierarchies so their
pyramids are shape-matched level by level. Supported ids:

  tiny                      in-repo 3-stage CNN for desk-scale runs; its frozen
                            reference weights are a fixed seeded initialization
  res18 res34 res50 wres50  torchvision ResNets (ImageNet weights fetched on use)
  hr18 hr32 hr48            HRNet via the optional ``timm`` dependency
"""

from __future__ import annotations

import torch
import torch.nn as nn
from torchvision import models as tv_models

BACKBONE_IDS = ("tiny", "res18", "res34", "res50", "wres50", "hr18", "hr32", "hr48")

# Weights of the frozen tiny reference network are fully determined by this seed.
TINY_REFERENCE_SEED = 90217

_TINY_CHANNELS = (16, 32, 64)


def canonical_backbone_id(backbone_id: str) -> str:
    bid = backbone_id.strip().lower().replace("hrnet", "hr").replace("wide_res", "wres")
    if bid not in BACKBONE_IDS:
        raise ValueError(f"unknown backbone {backbone_id!r}; choose from {BACKBONE_IDS}")
    return bid


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class TinyBackbone(nn.Module):
    """Three-stage CNN with stage strides 4/8/16, mirroring the ResNet tap schedule."""

    def __init__(self):
        super().__init__()
        c1, c2, c3 = _TINY_CHANNELS
        self.stem = _conv_block(3, c1, stride=2)
        self.stage1 = _conv_block(c1, c1, stride=2)
        self.stage2 = _conv_block(c1, c2, stride=2)
        self.stage3 = _conv_block(c2, c3, stride=2)
        self.stage_channels = (c1, c2, c3)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = self.stem(x)
        f1 = self.stage1(h)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        return [f1, f2, f3]


class ResNetStages(nn.Module):
    """Taps torchvision ResNet layer1..layer4 outputs; trailing unused stages dropped."""

    def __init__(self, resnet: nn.Module, n_stages: int):
        super().__init__()
        self.conv1 = resnet.conv1
        self.bn1 = resnet.bn1
        self.relu = resnet.relu
        self.maxpool = resnet.maxpool
        layers = [resnet.layer1, resnet.layer2, resnet.layer3, resnet.layer4][:n_stages]
        self.layers = nn.ModuleList(layers)
        self.stage_channels = tuple(
            _last_out_channels(layer) for layer in self.layers
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        feats = []
        for layer in self.layers:
            h = layer(h)
            feats.append(h)
        return feats


def _last_out_channels(layer: nn.Sequential) -> int:
    for module in reversed(list(layer[-1].modules())):
        if isinstance(module, nn.BatchNorm2d):
            return module.num_features
    raise ValueError("could not infer stage width")


class HRNetStages(nn.Module):
    """HRNet multi-resolution branches via timm's features_only interface."""

    def __init__(self, variant: str, pretrained: bool):
        super().__init__()
        try:
            import timm
        except ImportError as exc:
            raise ImportError(
                "HRNet backbones need the optional 'timm' dependency: "
                "pip install cdo[hrnet] (network access required for weights)"
            ) from exc
        try:
            self.net = timm.create_model(
                variant, features_only=True, pretrained=pretrained, out_indices=(0, 1, 2, 3)
            )
        except Exception as exc:
            raise RuntimeError(
                f"could not build {variant} with pretrained={pretrained}; ImageNet "
                "weights are fetched from the timm hub — download them on a networked "
                "machine (timm.create_model(..., pretrained=True)) and reuse the cache"
            ) from exc
        self.stage_channels = tuple(self.net.feature_info.channels())

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return list(self.net(x))


_RESNET_BUILDERS = {
    "res18": (tv_models.resnet18, "ResNet18_Weights"),
    "res34": (tv_models.resnet34, "ResNet34_Weights"),
    "res50": (tv_models.resnet50, "ResNet50_Weights"),
    "wres50": (tv_models.wide_resnet50_2, "Wide_ResNet50_2_Weights"),
}


def build_backbone(backbone_id: str, pretrained: bool, n_stages: int = 3) -> nn.Module:
    """Construct a stage-tapped backbone.

    ``pretrained=True`` loads the reference weights: ImageNet weights for the
    published backbones (hard error with a download hint when unavailable), a
    fixed seeded initialization for ``tiny``.
    """
    bid = canonical_backbone_id(backbone_id)
    if bid == "tiny":
        if n_stages > 3:
            raise ValueError("tiny backbone has 3 stages")
        seed = TINY_REFERENCE_SEED if pretrained else None
        with torch.random.fork_rng():
            if seed is not None:
                torch.manual_seed(seed)
            return TinyBackbone()
    if bid in _RESNET_BUILDERS:
        builder, weights_name = _RESNET_BUILDERS[bid]
        if pretrained:
            weights = getattr(tv_models, weights_name).IMAGENET1K_V1
            try:
                resnet = builder(weights=weights)
            except Exception as exc:
                raise RuntimeError(
                    f"could not fetch ImageNet weights for {bid}: {exc}. Download "
                    f"{weights.url} on a networked machine into "
                    "$TORCH_HOME/hub/checkpoints/ and retry."
                ) from exc
        else:
            resnet = builder(weights=None)
        return ResNetStages(resnet, n_stages)
    return HRNetStages(f"hrnet_w{bid[2:]}", pretrained)


def stage_count(backbone_id: str) -> int:
    bid = canonical_backbone_id(backbone_id)
    return 3 if bid == "tiny" else 4
