"""Pluggable frozen feature extractors.

The real system would plug pretrained perceptual / face-identity networks in
here; the desk-scale stand-ins are fixed-seed random convolutional pyramids,
frozen at construction, so every metric and perceptual loss is deterministic
and hermetic.  Anything satisfying the two protocols below can be dropped in.
"""

from __future__ import annotations

import math
from typing import Protocol, runtime_checkable

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .dynamic_skip import LEAKY_SLOPE


@runtime_checkable
class PerceptualBackbone(Protocol):
    """Deterministic multi-scale feature extractor."""

    def features(self, x: Tensor, layers: tuple[str, ...] | None = None) -> list[Tensor]: ...

    def pooled(self, x: Tensor) -> Tensor: ...


@runtime_checkable
class IdentityEmbedder(Protocol):
    """Maps an image to a unit vector; distance is 1 - cosine similarity."""

    def embed(self, x: Tensor) -> Tensor: ...

    def id_distance(self, a: Tensor, b: Tensor) -> Tensor: ...


def _seeded_init(module: nn.Module, seed: int):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.dim() > 1:
                fan_in = p[0].numel()
                p.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)
            else:
                p.uniform_(-0.1, 0.1, generator=g)
    module.requires_grad_(False)
    module.eval()


class FrozenPyramidBackbone(nn.Module):
    """Four-stage stride-2 pyramid over [0,1] images.

    Layers are named "p1".."p4" at 1/2, 1/4, 1/8, 1/16 resolution; ``pooled``
    is the spatial mean of the deepest stage.  "p2" and "p3" play the roles of
    the mid and deep semantic layers consumed by the label predictors.
    """

    LAYER_NAMES = ("p1", "p2", "p3", "p4")

    def __init__(self, seed: int = 1234, widths: tuple[int, ...] = (16, 32, 64, 64)):
        super().__init__()
        convs = []
        in_ch = 3
        for w in widths:
            convs.append(nn.Conv2d(in_ch, w, 3, 2, 1))
            in_ch = w
        self.convs = nn.ModuleList(convs)
        self.widths = tuple(widths)
        _seeded_init(self, seed)

    def channels(self, layer: str) -> int:
        return self.widths[self.LAYER_NAMES.index(layer)]

    def features(self, x: Tensor, layers: tuple[str, ...] | None = None) -> list[Tensor]:
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        wanted = self.LAYER_NAMES if layers is None else tuple(layers)
        unknown = set(wanted) - set(self.LAYER_NAMES)
        if unknown:
            raise ValueError(f"unknown backbone layers {sorted(unknown)}")
        h = x * 2.0 - 1.0
        out: dict[str, Tensor] = {}
        for name, conv in zip(self.LAYER_NAMES, self.convs):
            h = F.leaky_relu(conv(h), LEAKY_SLOPE)
            if name in wanted:
                out[name] = h
        feats = [out[name] for name in wanted]
        return [f[0] for f in feats] if squeeze else feats

    def pooled(self, x: Tensor) -> Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        v = self.features(x, layers=("p4",))[0].mean(dim=(2, 3))
        return v[0] if squeeze else v

    def forward(self, x: Tensor) -> list[Tensor]:
        return self.features(x)


class ZeroBackbone(nn.Module):
    """Emits all-zero features; isolates the pixel term of perceptual losses."""

    def __init__(self, n_layers: int = 3, channels: int = 4):
        super().__init__()
        self.n_layers = n_layers
        self.channels = channels

    def features(self, x: Tensor, layers=None) -> list[Tensor]:
        b = x.shape[0] if x.dim() == 4 else 1
        n = self.n_layers if layers is None else len(layers)
        side = max(1, x.shape[-1] // 2)
        return [torch.zeros(b, self.channels, side, side, dtype=x.dtype) for _ in range(n)]

    def pooled(self, x: Tensor) -> Tensor:
        b = x.shape[0] if x.dim() == 4 else 1
        return torch.zeros(b, self.channels, dtype=x.dtype)


PERCEPTUAL_LAYERS = ("p1", "p2", "p3")


def perceptual_distance(a: Tensor, b: Tensor, backbone,
                        layers: tuple[str, ...] = PERCEPTUAL_LAYERS) -> Tensor:
    """Mean-squared feature gap summed over the configured backbone layers."""
    fa = backbone.features(a, layers=layers)
    fb = backbone.features(b, layers=layers)
    total = torch.zeros((), dtype=a.dtype)
    for x, y in zip(fa, fb):
        total = total + F.mse_loss(x, y)
    return total


class FrozenIdentityEmbedder(nn.Module):
    """Fixed-seed convolutional embedder with unit-norm outputs."""

    def __init__(self, seed: int = 4321, dim: int = 32):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, 2, 1), nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(16, 32, 3, 2, 1), nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(32, 32, 3, 2, 1), nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.fc = nn.Linear(32, dim)
        _seeded_init(self, seed)

    def embed(self, x: Tensor) -> Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        h = self.net(x * 2.0 - 1.0).mean(dim=(2, 3))
        v = self.fc(h)
        v = v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return v[0] if squeeze else v

    def id_distance(self, a: Tensor, b: Tensor) -> Tensor:
        ea, eb = self.embed(a), self.embed(b)
        return 1.0 - (ea * eb).sum(dim=-1)
