"""Segmentation networks: UNet and three backbone-encoder UNets.

Every network maps a ``(B, 1, H, W)`` slice batch to ``(B, 4, H, W)`` logits
with channel order (background, wall, right atrium, left atrium).  ``H`` and
``W`` must be divisible by 32.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from torchvision.models import efficientnet_b0, resnet34, vgg16_bn

KINDS = ("unet", "resnet", "efficientnet", "vgg")
NUM_CLASSES = 4
DIVISOR = 32


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def _default_dropout(kind: str) -> float:
    return 0.0 if kind == "vgg" else 0.2


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: str
    dropout_rate: float | None = None
    base_width: int = 16
    num_classes: int = NUM_CLASSES
    in_channels: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown architecture kind {self.kind!r}; expected one of {KINDS}")
        if self.dropout_rate is None:
            object.__setattr__(self, "dropout_rate", _default_dropout(self.kind))
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.kind == "vgg" and self.dropout_rate != 0.0:
            raise ConfigError("vgg carries no dropout")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes must be {NUM_CLASSES}")
        if self.in_channels != 1:
            raise ConfigError("in_channels must be 1")
        if self.base_width < 1:
            raise ConfigError("base_width must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d)


class SegmentationNet(nn.Module):
    """Base class holding the ArchitectureSpec and enforcing the input shape contract."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected input of shape (B, 1, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % DIVISOR or w % DIVISOR:
            raise ShapeError(f"input height and width must be divisible by {DIVISOR}, got {h}x{w}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self._forward(x)

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


# -- UNet ---------------------------------------------------------------------


def _down(cin: int, cout: int, p: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 4, stride=2, padding=1),
        nn.BatchNorm2d(cout),
        nn.Dropout2d(p),
        nn.LeakyReLU(0.2),
    )


def _up(cin: int, cout: int, p: float) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1),
        nn.BatchNorm2d(cout),
        nn.Dropout2d(p),
        nn.LeakyReLU(0.2),
    )


class UNet(SegmentationNet):
    """Four 4x4/stride-2 down blocks, a down/up bottleneck, four mirrored up blocks."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__(spec)
        b, p = spec.base_width, spec.dropout_rate
        widths = [b, 2 * b, 4 * b, 8 * b]
        self.downs = nn.ModuleList()
        cin = spec.in_channels
        for w in widths:
            self.downs.append(_down(cin, w, p))
            cin = w
        self.bottleneck = nn.Sequential(_down(widths[-1], 16 * b, p), _up(16 * b, widths[-1], p))
        self.ups = nn.ModuleList()
        outs = [widths[2], widths[1], widths[0], widths[0]]
        cin = widths[-1]
        for skip, out in zip(reversed(widths), outs):
            self.ups.append(_up(cin + skip, out, p))
            cin = out
        self.head = nn.Conv2d(cin, spec.num_classes, 1)

    def _forward(self, x):
        skips = []
        for down in self.downs:
            x = down(x)
            skips.append(x)
        x = self.bottleneck(x)
        for up, skip in zip(self.ups, reversed(skips)):
            x = up(torch.cat([x, skip], dim=1))
        return self.head(x)


# -- backbone UNets -------------------------------------------------------------


def _conv_bn_relu(cin: int, cout: int, p: float) -> nn.Sequential:
    layers = [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout)]
    if p > 0:
        layers.append(nn.Dropout2d(p))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class UpsampleDecoder(nn.Module):
    """Nearest x2 upsampling, skip concatenation, two conv-BN-dropout-ReLU blocks per stage.

    ``encoder_channels`` lists the tap widths at strides 2, 4, 8, 16, 32.
    """

    def __init__(self, encoder_channels, decoder_channels=(256, 128, 64, 32, 16), p=0.2):
        super().__init__()
        skips = list(reversed(encoder_channels[:-1])) + [0]
        cin = encoder_channels[-1]
        self.stages = nn.ModuleList()
        for skip, out in zip(skips, decoder_channels):
            self.stages.append(nn.Sequential(_conv_bn_relu(cin + skip, out, p), _conv_bn_relu(out, out, p)))
            cin = out
        self.out_channels = cin

    def forward(self, feats):
        x = feats[-1]
        skips = list(reversed(feats[:-1])) + [None]
        for stage, skip in zip(self.stages, skips):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if skip is not None:
                x = torch.cat([x, skip], dim=1)
            x = stage(x)
        return x


class ResNetUNet(SegmentationNet):
    def __init__(self, spec: ArchitectureSpec):
        super().__init__(spec)
        r = resnet34(weights=None)
        r.conv1 = nn.Conv2d(spec.in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.stem = nn.Sequential(r.conv1, r.bn1, r.relu)
        self.pool = r.maxpool
        self.layers = nn.ModuleList([r.layer1, r.layer2, r.layer3, r.layer4])
        self.decoder = UpsampleDecoder((64, 64, 128, 256, 512), p=spec.dropout_rate)
        self.head = nn.Conv2d(self.decoder.out_channels, spec.num_classes, 1)

    def _forward(self, x):
        x = self.stem(x)
        feats = [x]
        x = self.pool(x)
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return self.head(self.decoder(feats))


class EfficientNetUNet(SegmentationNet):
    # feature indices whose outputs sit at strides 2, 4, 8, 16, 32
    taps = (1, 2, 3, 5, 7)

    def __init__(self, spec: ArchitectureSpec):
        super().__init__(spec)
        e = efficientnet_b0(weights=None)
        stem = e.features[0]
        stem[0] = nn.Conv2d(spec.in_channels, 32, 3, stride=2, padding=1, bias=False)
        self.features = nn.ModuleList(e.features[: self.taps[-1] + 1])
        self.decoder = UpsampleDecoder((16, 24, 40, 112, 320), p=spec.dropout_rate)
        self.head = nn.Conv2d(self.decoder.out_channels, spec.num_classes, 1)

    def _forward(self, x):
        feats = []
        for i, block in enumerate(self.features):
            x = block(x)
            if i in self.taps:
                feats.append(x)
        return self.head(self.decoder(feats))


class VGGUNet(SegmentationNet):
    """VGG16 encoder tapped before each pooling; transposed-conv decoder, no dropout."""

    def __init__(self, spec: ArchitectureSpec, decoder_channels=(256, 256, 128, 64, 32)):
        super().__init__(spec)
        feats = vgg16_bn(weights=None).features
        feats[0] = nn.Conv2d(spec.in_channels, 64, 3, padding=1)
        pools = [i for i, layer in enumerate(feats) if isinstance(layer, nn.MaxPool2d)]
        self.blocks = nn.ModuleList()
        start = 0
        for stop in pools:
            self.blocks.append(nn.Sequential(*feats[start:stop]))
            start = stop + 1
        self.pool = nn.MaxPool2d(2, 2)
        widths = (64, 128, 256, 512, 512)
        self.center = _conv_bn_relu(512, 512, 0.0)
        self.ups = nn.ModuleList()
        self.convs = nn.ModuleList()
        cin = 512
        for skip, out in zip(reversed(widths), decoder_channels):
            self.ups.append(nn.ConvTranspose2d(cin, out, 2, stride=2))
            self.convs.append(nn.Sequential(_conv_bn_relu(out + skip, out, 0.0), _conv_bn_relu(out, out, 0.0)))
            cin = out
        self.head = nn.Conv2d(cin, spec.num_classes, 1)

    def _forward(self, x):
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.center(x)
        for up, conv, skip in zip(self.ups, self.convs, reversed(skips)):
            x = conv(torch.cat([up(x), skip], dim=1))
        return self.head(x)


_BUILDERS = {"unet": UNet, "resnet": ResNetUNet, "efficientnet": EfficientNetUNet, "vgg": VGGUNet}


def _he_uniform_(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(spec: ArchitectureSpec, seed: int = 0) -> SegmentationNet:
    """Construct a freshly initialised network; equal (spec, seed) give equal parameters."""
    if not isinstance(spec, ArchitectureSpec):
        raise ConfigError("spec must be an ArchitectureSpec")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = _BUILDERS[spec.kind](spec)
        _he_uniform_(model)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _as_batch(image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] != 1:
        raise ShapeError(f"expected a 1xHxW image, got shape {tuple(x.shape)}")
    return x[None]


def argmax_classes(logits) -> np.ndarray:
    """Channel argmax over axis -3; ties resolve to the lowest class index."""
    logits = np.asarray(logits)
    return np.argmax(logits, axis=-3).astype(np.int64)


@torch.no_grad()
def forward(model: nn.Module, image) -> np.ndarray:
    """Evaluation-mode logits ``(4, H, W)`` for a single ``1xHxW`` image."""
    was_training = model.training
    model.eval()
    try:
        out = model(_as_batch(image))
    finally:
        model.train(was_training)
    return out[0].numpy()


def predict(model: nn.Module, image) -> np.ndarray:
    """Integer class map ``(H, W)`` for a single image."""
    return argmax_classes(forward(model, image))
