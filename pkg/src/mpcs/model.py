"""Encoders, projection head and classifier head."""
from __future__ import annotations

import re

import numpy as np
import torch
from torch import nn

from .errors import ShapeMismatch, UnknownEncoder

# pixel normalisation applied by every encoder to uint8 input
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

REFERENCE_HEAD_DIMS = {
    "resnet50": [1024, 128],
    # printed as 2048-1204-128; kept verbatim, 1204 is probably meant to be 1024
    "efficientnet_b2": [2048, 1204, 128],
}


def to_tensor(batch) -> torch.Tensor:
    """B x S x S x 3 uint8 (numpy or tensor) -> normalised B x 3 x S x S float32."""
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(np.ascontiguousarray(batch))
    if batch.ndim != 4 or batch.shape[-1] != 3:
        raise ShapeMismatch(f"expected B x S x S x 3 images, got {tuple(batch.shape)}")
    x = batch.permute(0, 3, 1, 2).float() / 255.0
    return (x - PIXEL_MEAN) / PIXEL_STD


class ConvBlock(nn.Sequential):
    def __init__(self, c_in, c_out, pool=True):
        layers = [
            nn.Conv2d(c_in, c_out, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        ]
        if pool:
            layers.append(nn.MaxPool2d(2))
        super().__init__(*layers)


class SmallConvNet(nn.Module):
    """Four conv blocks and a global average pool; the desk-scale default encoder."""

    def __init__(self, widths=(16, 32, 64, 64)):
        super().__init__()
        blocks, c_in = [], 3
        for i, w in enumerate(widths):
            blocks.append(ConvBlock(c_in, w, pool=i < len(widths) - 1))
            c_in = w
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = c_in

    def forward(self, x):
        return self.pool(self.blocks(x)).flatten(1)


class LinearPoolNet(nn.Module):
    """Per-pixel linear map (1x1 conv, no bias) followed by a global average pool."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(3, dim, kernel_size=1, bias=False)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = dim

    def forward(self, x):
        return self.pool(self.proj(x)).flatten(1)


class EncoderAdapter(nn.Module):
    """Uniform wrapper: uint8-normalised images in, pooled B x d features out."""

    def __init__(self, name: str, backbone: nn.Module, feature_dim: int,
                 weights_source: str = "random", input_size: int | None = None):
        super().__init__()
        self.name = name
        self.backbone = backbone
        self.feature_dim = feature_dim
        self.weights_source = weights_source
        self.input_size = input_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected B x 3 x S x S, got {tuple(x.shape)}")
        if self.input_size is not None and tuple(x.shape[-2:]) != (self.input_size, self.input_size):
            raise ShapeMismatch(f"{self.name} expects {self.input_size}px input, got {tuple(x.shape[-2:])}")


def _torchvision_backbone(name: str):
    import torchvision

    if name == "resnet50":
        net = torchvision.models.resnet50(weights=None)
        dim = net.fc.in_features
        net.fc = nn.Identity()
    else:
        net = torchvision.models.efficientnet_b2(weights=None)
        dim = net.classifier[1].in_features
        net.classifier = nn.Identity()
    return net, dim


def build_encoder(name: str = "small_cnn", weights: str | None = None, input_size: int | None = None) -> EncoderAdapter:
    """Instantiate a registered encoder.

    Registered names: ``small_cnn`` (d=64), ``toy<d>`` (linear, d given),
    ``resnet50`` and ``efficientnet_b2``. ``weights`` is a path to a state dict
    of the backbone (for example converted ImageNet weights); nothing is
    downloaded.
    """
    toy = re.fullmatch(r"toy(\d+)", name)
    if name == "small_cnn":
        backbone = SmallConvNet()
        dim = backbone.out_dim
    elif toy:
        dim = int(toy.group(1))
        backbone = LinearPoolNet(dim)
    elif name in REFERENCE_HEAD_DIMS:
        backbone, dim = _torchvision_backbone(name)
    else:
        raise UnknownEncoder(name)
    source = "random"
    if weights is not None:
        state = torch.load(weights, map_location="cpu", weights_only=True)
        backbone.load_state_dict(state, strict=False)
        source = "external_pretrained"
    return EncoderAdapter(name, backbone, dim, source, input_size)


def head_dims_for(encoder_name: str, feature_dim: int | None = None) -> list[int]:
    """Projection-head widths for an encoder.

    Reference encoders return their published widths. Toy/small encoders use
    ``[d, d // 2, min(d, 128)]``: input, hidden, output.
    """
    if encoder_name in REFERENCE_HEAD_DIMS:
        return list(REFERENCE_HEAD_DIMS[encoder_name])
    toy = re.fullmatch(r"toy(\d+)", encoder_name)
    if toy:
        d = int(toy.group(1))
    elif encoder_name == "small_cnn":
        d = 64
    else:
        raise UnknownEncoder(encoder_name)
    if feature_dim is not None:
        d = feature_dim
    return [d, max(d // 2, 1), min(d, 128)]


class ProjectionHead(nn.Module):
    """z = W2 relu(W1 h): exactly one hidden layer."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim, bias=bias)
        self.fc2 = nn.Linear(hidden_dim, out_dim, bias=bias)
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden_dim, out_dim

    @classmethod
    def for_encoder(cls, enc: EncoderAdapter, bias: bool = True, dims=None) -> "ProjectionHead":
        # the hidden and output widths are the last two entries; the input is the encoder's d
        dims = list(dims or head_dims_for(enc.name, enc.feature_dim))
        return cls(enc.feature_dim, dims[-2], dims[-1], bias=bias)

    def forward(self, h):
        return self.fc2(torch.relu(self.fc1(h)))


class ClassifierHead(nn.Module):
    """Dropout and a linear layer over (optionally standardised) features.

    ``feature_mean``/``feature_scale`` are identity by default; linear
    evaluation fits them on the training features of the frozen encoder.
    """

    def __init__(self, in_dim: int, n_classes: int, dropout: float = 0.3):
        super().__init__()
        self.register_buffer("feature_mean", torch.zeros(in_dim))
        self.register_buffer("feature_scale", torch.ones(in_dim))
        self.dropout = nn.Dropout(dropout)
        self.linear = nn.Linear(in_dim, n_classes)

    def fit_standardization(self, feats: torch.Tensor, eps: float = 1e-8) -> None:
        self.feature_mean.copy_(feats.mean(0))
        self.feature_scale.copy_(feats.std(0, unbiased=False).clamp_min(eps))

    def forward(self, h):
        return self.linear(self.dropout((h - self.feature_mean) / self.feature_scale))


class Classifier(nn.Module):
    """Encoder followed by a classifier head; the unit used for fine-tuning and Grad-CAM."""

    def __init__(self, encoder: EncoderAdapter, head: ClassifierHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x):
        return self.head(self.encoder(x))


def encode(enc: EncoderAdapter, batch) -> torch.Tensor:
    """Eval-mode pooled features for a uint8 image batch (or a prepared float tensor)."""
    x = batch if isinstance(batch, torch.Tensor) and batch.is_floating_point() else to_tensor(batch)
    enc.check_input(x)
    was_training = enc.training
    enc.eval()
    try:
        with torch.no_grad():
            return enc(x.to(next(enc.parameters()).dtype))
    finally:
        enc.train(was_training)


def project(head: ProjectionHead, H: torch.Tensor) -> torch.Tensor:
    H = torch.as_tensor(H)
    if H.ndim != 2 or H.shape[1] != head.in_dim:
        raise ShapeMismatch(f"expected B x {head.in_dim}, got {tuple(H.shape)}")
    return head(H.to(head.fc1.weight.dtype))


def state_hash(module: nn.Module) -> str:
    """Content hash of a module's parameters and buffers."""
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
