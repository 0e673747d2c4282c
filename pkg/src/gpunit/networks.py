"""Trainable networks: encoders, decoder with shape branch, classifier, generator,
discriminator and the noise-to-style mapping network.

Layout conventions used throughout:
  * images are float tensors in [0, 1], shape (B, 3, S, S), S a power of 2 >= 32
  * the content code is a single-channel map at S/4 (two stride-2 blocks)
  * encoder feature stages are [stem @ S, down1 @ S/2, down2 @ S/4, code @ S/4]
  * the generator mirrors this with layers [0 @ S/4, 1 @ S/2, 2 @ S]
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ModelConfig
from .dynamic_skip import ConditionalDynamicSkip, DynamicSkip, LEAKY_SLOPE


def adain_modulate(f: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    """Renormalize each channel to the externally supplied scale and shift.

    Channels are standardized to zero mean / unit (population) std over the
    spatial dims, then scaled by ``gamma`` and shifted by ``beta``.  ``gamma``
    and ``beta`` are vectors of length C, or (B, C) for per-sample styles.
    """
    squeeze = f.dim() == 3
    if squeeze:
        f = f[None]
    if f.dim() != 4:
        raise ValueError(f"expected a (B, C, H, W) feature map, got shape {tuple(f.shape)}")
    b, c, h, w = f.shape
    if h * w == 0:
        raise ValueError("feature map has zero spatial extent")
    for name, v in (("gamma", gamma), ("beta", beta)):
        if v.shape[-1] != c:
            raise ValueError(f"{name} has length {v.shape[-1]}, expected {c}")
    gamma = gamma.reshape(-1, c, 1, 1)
    beta = beta.reshape(-1, c, 1, 1)
    mean = f.mean(dim=(2, 3), keepdim=True)
    var = f.var(dim=(2, 3), unbiased=False, keepdim=True)
    out = (f - mean) / torch.sqrt(var + eps) * gamma + beta
    return out[0] if squeeze else out


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad.neg()


def gradient_reversal(x: Tensor) -> Tensor:
    """Identity forward; negates the gradient on the way back."""
    return _ReverseGrad.apply(x)


def _conv(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 3, stride, 1)


class _DownBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, norm: bool = True):
        super().__init__()
        self.conv = _conv(in_ch, out_ch, stride=2)
        self.norm = nn.InstanceNorm2d(out_ch, affine=True) if norm else nn.Identity()

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), LEAKY_SLOPE)


def _check_image(x: Tensor, size: int):
    if x.shape[-3:] != (3, size, size):
        raise ValueError(f"expected image of shape (3, {size}, {size}), got {tuple(x.shape[-3:])}")


class ContentEncoder(nn.Module):
    """Extracts the single-channel spatial content code at quarter resolution.

    In train mode, unit-seeded Gaussian noise of std ``noise_std`` is added
    after encoding so downstream consumers cannot rely on fine code detail.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.base_width
        self.cfg = cfg
        self.stem = _conv(3, w)
        self.down1 = _DownBlock(w, 2 * w)
        self.down2 = _DownBlock(2 * w, 4 * w)
        self.head = _conv(4 * w, cfg.content_channels)

    def stage_channels(self) -> list[int]:
        w = self.cfg.base_width
        return [w, 2 * w, 4 * w, self.cfg.content_channels]

    def features(self, x: Tensor) -> list[Tensor]:
        """All feature stages: [stem @ S, down1 @ S/2, down2 @ S/4, code @ S/4]."""
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        _check_image(x, self.cfg.image_size)
        f0 = F.leaky_relu(self.stem(x), LEAKY_SLOPE)
        f1 = self.down1(f0)
        f2 = self.down2(f1)
        code = self.head(f2)
        feats = [f0, f1, f2, code]
        return [f[0] for f in feats] if squeeze else feats

    def forward(self, x: Tensor) -> Tensor:
        code = self.features(x)[-1]
        if self.training and self.cfg.noise_std > 0:
            code = code + torch.randn_like(code) * self.cfg.noise_std
        return code


class StyleEncoder(nn.Module):
    """Flattens an image into a style vector; no normalization layers so the
    global color/texture statistics survive."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.base_width
        self.cfg = cfg
        self.net = nn.Sequential(
            _conv(3, w, 2), nn.LeakyReLU(LEAKY_SLOPE),
            _conv(w, 2 * w, 2), nn.LeakyReLU(LEAKY_SLOPE),
            _conv(2 * w, 4 * w, 2), nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.fc = nn.Linear(4 * w, cfg.style_dim)

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        _check_image(x, self.cfg.image_size)
        h = self.net(x).mean(dim=(2, 3))
        s = self.fc(h)
        return s[0] if squeeze else s


class StyleToAdain(nn.Module):
    """Maps a style vector to per-layer (gamma, beta) pairs for AdaIN layers."""

    def __init__(self, style_dim: int, layer_channels: list[int], hidden: int = 128):
        super().__init__()
        self.layer_channels = list(layer_channels)
        total = 2 * sum(layer_channels)
        self.net = nn.Sequential(
            nn.Linear(style_dim, hidden), nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(hidden, total),
        )

    def forward(self, style: Tensor) -> list[tuple[Tensor, Tensor]]:
        raw = self.net(style)
        out = []
        idx = 0
        for ch in self.layer_channels:
            delta_gamma = raw[..., idx:idx + ch]
            beta = raw[..., idx + ch:idx + 2 * ch]
            # parameterize around identity so an untrained style keeps unit scale
            out.append((1.0 + delta_gamma, beta))
            idx += 2 * ch
        return out


def one_hot(label: Tensor, n_domains: int) -> Tensor:
    if label.min() < 0 or label.max() >= n_domains:
        raise ValueError(f"domain index out of range [0, {n_domains})")
    return F.one_hot(label, n_domains).float()


def _broadcast_label(label_1h: Tensor, h: int, w: int) -> Tensor:
    return label_1h[:, :, None, None].expand(-1, -1, h, w)


class Decoder(nn.Module):
    """Reconstructs appearance from (content, style, domain); the shallow trunk
    doubles as the shape predictor and never sees the style vector."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.base_width
        self.cfg = cfg
        in_ch = cfg.content_channels + cfg.n_domains
        self.trunk0 = nn.Sequential(_conv(in_ch, 4 * w),
                                    nn.InstanceNorm2d(4 * w, affine=True),
                                    nn.LeakyReLU(LEAKY_SLOPE))
        self.trunk1 = _UpBlock(4 * w, 2 * w)
        self.trunk2 = _UpBlock(2 * w, w)
        self.seg_head = _conv(w, 1)
        self.app1 = _conv(w, w)
        self.app2 = _conv(w, w)
        self.style_map = StyleToAdain(cfg.style_dim, [w, w])
        self.to_rgb = _conv(w, 3)

    def _trunk(self, content: Tensor, label: Tensor) -> Tensor:
        label_1h = one_hot(label, self.cfg.n_domains)
        x = torch.cat([content, _broadcast_label(label_1h, *content.shape[-2:])], dim=1)
        x = self.trunk0(x)
        x = self.trunk1(x)
        return self.trunk2(x)

    def predict_shape(self, content: Tensor, label: Tensor) -> Tensor:
        """Foreground probability map from content and domain only."""
        return torch.sigmoid(self.seg_head(self._trunk(content, label)))

    def forward(self, content: Tensor, style: Tensor, label: Tensor) -> tuple[Tensor, Tensor]:
        trunk = self._trunk(content, label)
        seg = torch.sigmoid(self.seg_head(trunk))
        (g1, b1), (g2, b2) = self.style_map(style)
        x = F.leaky_relu(adain_modulate(self.app1(trunk), g1, b1), LEAKY_SLOPE)
        x = F.leaky_relu(adain_modulate(self.app2(x), g2, b2), LEAKY_SLOPE)
        rgb = torch.sigmoid(self.to_rgb(x))
        return rgb, seg


class _UpBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = _conv(in_ch, out_ch)
        self.norm = nn.InstanceNorm2d(out_ch, affine=True)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.leaky_relu(self.norm(self.conv(x)), LEAKY_SLOPE)


class DomainClassifier(nn.Module):
    """Classifies the domain from a content code; trained through gradient
    reversal so the encoder learns to defeat it."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.base_width
        self.net = nn.Sequential(
            _conv(cfg.content_channels, 2 * w, 2), nn.LeakyReLU(LEAKY_SLOPE),
            _conv(2 * w, 4 * w, 2), nn.LeakyReLU(LEAKY_SLOPE),
        )
        self.fc = nn.Linear(4 * w, cfg.n_domains)

    def forward(self, content: Tensor) -> Tensor:
        return self.fc(self.net(content).mean(dim=(2, 3)))


class Generator(nn.Module):
    """Style-modulated decoder for translation, with dynamic skip fusion at the
    configured layers.  ``prior_channels`` widens the first layer for the
    semantic-prior concatenation used in semi-supervised training."""

    def __init__(self, cfg: ModelConfig, prior_channels: int = 0, conditional: bool = False):
        super().__init__()
        w = cfg.base_width
        self.cfg = cfg
        self.prior_channels = prior_channels
        self.conditional = conditional
        self.widths = [4 * w, 2 * w, w]
        self.g0 = _conv(cfg.content_channels + prior_channels, 4 * w)
        self.g1 = _conv(4 * w, 2 * w)
        self.g2 = _conv(2 * w, w)
        self.style_map = StyleToAdain(cfg.style_dim, self.widths)
        self.to_rgb = _conv(w, 3)

        # encoder stage feeding generator layer l: stages run [S, S/2, S/4], layers [S/4, S/2, S]
        enc_ch = {0: 4 * w, 1: 2 * w, 2: w}
        skip_cls = ConditionalDynamicSkip if conditional else DynamicSkip
        skips = {}
        prev_hidden = cfg.content_channels
        for layer in cfg.dsc_layers:
            unit = skip_cls(prev_hidden, enc_ch[layer], self.widths[layer])
            skips[str(layer)] = unit
            prev_hidden = unit.hidden_ch
        self.skips = nn.ModuleDict(skips)

    def encoder_feature_for_layer(self, enc_feats: list[Tensor], layer: int) -> Tensor:
        # enc_feats = [stem @ S, down1 @ S/2, down2 @ S/4, code]
        return enc_feats[2 - layer]

    def forward(self, content: Tensor, style: Tensor, enc_feats: list[Tensor] | None = None,
                ell: float | None = None, task: str = "tran",
                force_zero_masks: bool = False) -> tuple[Tensor, list[Tensor]]:
        """Returns the generated image in [0, 1] and the skip masks, one per
        configured layer in layer order."""
        if self.conditional and ell is None:
            raise ValueError("this generator is consistency-conditioned: ell is required")
        if self.skips and enc_feats is None:
            raise ValueError("encoder features are required when skip layers are configured")
        adain_params = self.style_map(style)
        x = content
        # the recurrent skip state starts from the bare content code, not the
        # prior-widened generator input
        state = content[:, :self.cfg.content_channels]
        masks: list[Tensor] = []

        def run_skip(layer: int, f_g: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
            f_e = self.encoder_feature_for_layer(enc_feats, layer)
            unit = self.skips[str(layer)]
            if self.conditional:
                fused, m, h_new = unit(f_e, f_g, h, ell=ell, task=task)
                if force_zero_masks:
                    m = torch.zeros_like(m)
                    fused = f_g
            else:
                fused, m, h_new = unit(f_e, f_g, h, force_zero_mask=force_zero_masks)
            masks.append(m)
            return fused, h_new

        for layer, conv in enumerate((self.g0, self.g1, self.g2)):
            if layer > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            gamma, beta = adain_params[layer]
            x = F.leaky_relu(adain_modulate(conv(x), gamma, beta), LEAKY_SLOPE)
            if str(layer) in self.skips:
                x, state = run_skip(layer, x, state)
        return torch.sigmoid(self.to_rgb(x)), masks


class Discriminator(nn.Module):
    """Multi-domain discriminator with per-domain logit heads.

    The style feature is the channel-wise spatial mean of the designated
    middle layer (attribute ``middle_index`` into ``self.downs``).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.base_width
        self.cfg = cfg
        n_down = int(math.log2(cfg.image_size)) - 2
        widths = [min(4 * w, w * 2 ** i) for i in range(n_down)]
        self.stem = nn.Sequential(_conv(3, w), nn.LeakyReLU(LEAKY_SLOPE))
        downs = []
        in_ch = w
        for out_ch in widths:
            downs.append(nn.Sequential(_conv(in_ch, out_ch, 2), nn.LeakyReLU(LEAKY_SLOPE)))
            in_ch = out_ch
        self.downs = nn.ModuleList(downs)
        self.middle_index = 1
        self.head = nn.Sequential(nn.Conv2d(in_ch, in_ch, 3, 1, 1), nn.LeakyReLU(LEAKY_SLOPE),
                                  nn.Conv2d(in_ch, cfg.n_domains, 4))

    @property
    def style_feature_dim(self) -> int:
        w = self.cfg.base_width
        return min(4 * w, w * 2 ** self.middle_index)

    def forward(self, y: Tensor, label: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (per-sample realism logit for the labeled domain, style feature)."""
        _check_image(y, self.cfg.image_size)
        one_hot(label, self.cfg.n_domains)  # validates range
        x = self.stem(y)
        f_d = None
        for i, block in enumerate(self.downs):
            x = block(x)
            if i == self.middle_index:
                f_d = x.mean(dim=(2, 3))
        logits = self.head(x).flatten(1)
        logit = logits.gather(1, label[:, None]).squeeze(1)
        return logit, f_d


class MappingNetwork(nn.Module):
    """Feed-forward map from unit Gaussian noise to the style-code distribution."""

    def __init__(self, style_dim: int, hidden: int = 128):
        super().__init__()
        self.style_dim = style_dim
        self.net = nn.Sequential(
            nn.Linear(style_dim, hidden), nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(hidden, hidden), nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(hidden, style_dim),
        )

    def forward(self, z: Tensor) -> Tensor:
        return self.net(z)

    def sample(self, n: int, generator: torch.Generator | None = None) -> Tensor:
        z = torch.randn(n, self.style_dim, generator=generator)
        return self(z)
