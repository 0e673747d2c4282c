"""Semi-supervised position guidance for distant domains.

A handful of labeled images (head / tail click points rendered as circles)
train one tiny predictor per domain on frozen backbone features.  During
translation training the predictors are frozen and the mass-weighted
centroids of their outputs are compared between the source image and the
translation, clamped at a margin so bad predictions cannot dominate.

Axis conventions: annotation points use image pixel coordinates with ``x``
the column (horizontal) and ``y`` the row (vertical).  Centroids are
``(row, col)`` pairs.  The position loss weights the horizontal gap with
``lambda_p_i`` and the vertical gap with ``lambda_p_j``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import SemiConfig

_POINT_KINDS = ("head", "tail")


@dataclass
class LabelAnnotation:
    """Click annotation for one image: at most one point per kind."""

    image_id: str
    radius: int
    points: list[dict] = field(default_factory=list)

    def __post_init__(self):
        kinds = [p["kind"] for p in self.points]
        if len(kinds) != len(set(kinds)):
            raise ValueError("at most one point per kind")
        for p in self.points:
            if p["kind"] not in _POINT_KINDS:
                raise ValueError(f"unknown point kind {p['kind']!r}")

    def point(self, kind: str) -> tuple[int, int] | None:
        for p in self.points:
            if p["kind"] == kind:
                return (p["x"], p["y"])
        return None

    def scaled(self, factor: float) -> "LabelAnnotation":
        pts = [{"kind": p["kind"], "x": int(round(p["x"] * factor)),
                "y": int(round(p["y"] * factor))} for p in self.points]
        return LabelAnnotation(self.image_id, max(1, int(round(self.radius * factor))), pts)

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "radius": self.radius, "points": self.points}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelAnnotation":
        return cls(d["image_id"], d["radius"], list(d["points"]))

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path: str) -> "LabelAnnotation":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def render_label_map(ann: LabelAnnotation, size: tuple[int, int]) -> Tensor:
    """Two-channel map (head, tail) with value 1 inside each point's circle."""
    h, w = size
    out = torch.zeros(2, h, w)
    ii = torch.arange(h).view(-1, 1)
    jj = torch.arange(w).view(1, -1)
    for ch, kind in enumerate(_POINT_KINDS):
        pt = ann.point(kind)
        if pt is None:
            continue
        x, y = pt
        inside = (ii - y) ** 2 + (jj - x) ** 2 <= ann.radius ** 2
        out[ch][inside] = 1.0
    return out


def loss_label(pred: Tensor, truth: Tensor, lambda_P: float, eps: float = 1e-6) -> Tensor:
    """Weighted MSE plus per-channel KL between normalized maps.

    The circle masks are not distributions, so each channel is flattened,
    epsilon-smoothed and renormalized before the KL term; KL terms are
    averaged over channels (and batch).
    """
    if pred.shape != truth.shape:
        raise ValueError("label maps must share a shape")
    mse = F.mse_loss(pred, truth)
    spatial = pred.shape[-2] * pred.shape[-1]
    p = pred.reshape(-1, spatial) + eps
    q = truth.reshape(-1, spatial) + eps
    p = p / p.sum(dim=-1, keepdim=True)
    q = q / q.sum(dim=-1, keepdim=True)
    kl = (p * (p / q).log()).sum(dim=-1).mean()
    return lambda_P * mse + kl


def centroid(mass_map: Tensor) -> tuple[Tensor, Tensor] | None:
    """Mass-weighted mean (row, col); None when total mass is negligible."""
    if (mass_map < 0).any():
        raise ValueError("mass map must be nonnegative")
    if mass_map.dim() != 2:
        raise ValueError("centroid expects a single-channel 2D map")
    total = mass_map.sum()
    if total.item() < 1e-8:
        return None
    h, w = mass_map.shape
    rows = torch.arange(h, dtype=mass_map.dtype).view(-1, 1)
    cols = torch.arange(w, dtype=mass_map.dtype).view(1, -1)
    r = (mass_map * rows).sum() / total
    c = (mass_map * cols).sum() / total
    return r, c


def _as_tensor(v) -> Tensor:
    return v if torch.is_tensor(v) else torch.tensor(float(v))


def loss_position(c_x: dict, c_yhat: dict, cfg: SemiConfig) -> Tensor:
    """Clamped squared centroid gap, horizontal weighted over vertical.

    ``c_x`` / ``c_yhat`` map kind -> (row, col) or None.  Beyond the margin
    ``tau`` the clamp makes the loss flat (zero gradient); a missing centroid
    on either side contributes the clamped maximum for that kind.
    """
    total = torch.zeros(())
    for kind in _POINT_KINDS:
        a, b = c_x.get(kind), c_yhat.get(kind)
        if a is None or b is None:
            total = total + (cfg.lambda_p_i + cfg.lambda_p_j) * cfg.tau
            continue
        ar, ac = map(_as_tensor, a)
        br, bc = map(_as_tensor, b)
        total = total + cfg.lambda_p_i * torch.clamp_max((ac - bc) ** 2, cfg.tau)
        total = total + cfg.lambda_p_j * torch.clamp_max((ar - br) ** 2, cfg.tau)
    return total


class LabelPredictor(nn.Module):
    """One conv + sigmoid over concatenated mid and upsampled deep backbone features."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 2, 3, 1, 1)

    def forward(self, mid: Tensor, deep: Tensor) -> Tensor:
        deep_up = F.interpolate(deep, size=mid.shape[-2:], mode="nearest")
        return torch.sigmoid(self.conv(torch.cat([mid, deep_up], dim=1)))


def predict_label_map(predictor: LabelPredictor, backbone, image: Tensor) -> Tensor:
    """Runs the frozen backbone and the predictor; keeps the graph to ``image``."""
    squeeze = image.dim() == 3
    if squeeze:
        image = image[None]
    mid, deep = backbone.features(image, layers=("p2", "p3"))
    out = predictor(mid, deep)
    return out[0] if squeeze else out


def train_label_predictor(images: Tensor, annotations: list[LabelAnnotation], backbone,
                          cfg: SemiConfig, seed: int = 0) -> LabelPredictor:
    """Fits one domain's predictor to convergence on the labeled set, then freezes it."""
    if len(annotations) == 0:
        raise ValueError("need at least one annotation to train a label predictor")
    if images.shape[0] != len(annotations):
        raise ValueError("one annotation per image required")
    torch.manual_seed(seed)
    size = images.shape[-1]
    with torch.no_grad():
        mid, deep = backbone.features(images, layers=("p2", "p3"))
    map_size = mid.shape[-1]
    truth = torch.stack([render_label_map(a.scaled(map_size / size), (map_size, map_size))
                         for a in annotations])
    predictor = LabelPredictor(mid.shape[1] + deep.shape[1])
    opt = torch.optim.Adam(predictor.parameters(), lr=cfg.predictor_lr)
    for _ in range(cfg.predictor_iterations):
        opt.zero_grad()
        pred = predictor(mid, deep)
        loss = loss_label(pred, truth, cfg.lambda_P)
        loss.backward()
        opt.step()
    predictor.requires_grad_(False)
    predictor.eval()
    return predictor


def map_centroids(label_map: Tensor) -> dict:
    """Centroids of the head / tail channels of a 2xHxW map."""
    return {kind: centroid(label_map[ch]) for ch, kind in enumerate(_POINT_KINDS)}


def inject_semantic_prior(content: Tensor, backbone_feat: Tensor) -> Tensor:
    """Concatenates a backbone feature (resized to the content grid) onto the
    content code, widening what the generator's first layer consumes."""
    if backbone_feat.shape[-2:] != content.shape[-2:]:
        backbone_feat = F.interpolate(backbone_feat, size=content.shape[-2:], mode="nearest")
    return torch.cat([content, backbone_feat], dim=1)
