"""Stage I: distill cross-domain correspondence into the content encoder.

One optimizer drives the content encoder, style encoder, decoder and domain
classifier to jointly minimize appearance reconstruction, shape
reconstruction, pair-sharing and domain-confusion regularization.  Pairs come
from the factory (same latent, two domains); unary terms are additionally
applied to standalone images so the encoder generalizes beyond pairs.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .backbones import FrozenPyramidBackbone, perceptual_distance
from .config import ModelConfig, Stage1Config
from .factory import DatasetManifest, PairedSample, RenderCache, make_pair
from .networks import (ContentEncoder, Decoder, DomainClassifier, StyleEncoder,
                       gradient_reversal)

STAGE1_LOSS_KEYS = ("arec", "srec", "dis", "reg")


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is non-finite ({value}); aborting")
        self.term = term


def _check_finite(report: dict[str, Tensor]):
    for term, value in report.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not np.isfinite(v):
            raise NonFiniteLossError(term, v)


def loss_appearance_rec(x: Tensor, x_bar: Tensor, backbone) -> Tensor:
    """Mean-squared pixel error plus feature-space distance; symmetric."""
    if x.shape != x_bar.shape:
        raise ValueError("image shapes must match")
    return F.mse_loss(x_bar, x) + perceptual_distance(x_bar, x, backbone)


def loss_shape_rec(seg_pred: Tensor, x_s: Tensor, lambda_s: float) -> Tensor:
    """Weighted mean absolute error between shape prediction and mask."""
    if seg_pred.shape != x_s.shape:
        raise ValueError("segmentation shapes must match")
    return lambda_s * (seg_pred - x_s).abs().mean()


def loss_dis(c_x: Tensor, c_y: Tensor, seg_from_y: Tensor, x_s: Tensor,
             lambda_s: float) -> Tensor:
    """Pulls paired content codes together and makes the partner's code
    reconstruct this member's shape (the cross term that simulates translation)."""
    return (c_x - c_y).abs().mean() + lambda_s * (seg_from_y - x_s).abs().mean()


def loss_reg(content: Tensor, classifier_logits: Tensor, label: Tensor,
             lambda_r: float) -> Tensor:
    """Domain cross-entropy (through the reversal layer upstream) plus a
    mean-squared magnitude penalty on the content code."""
    ce = F.cross_entropy(classifier_logits, label)
    return ce + lambda_r * content.pow(2).mean()


@dataclass
class Stage1Nets:
    content_encoder: ContentEncoder
    style_encoder: StyleEncoder
    decoder: Decoder
    classifier: DomainClassifier

    @classmethod
    def build(cls, cfg: ModelConfig) -> "Stage1Nets":
        return cls(ContentEncoder(cfg), StyleEncoder(cfg), Decoder(cfg), DomainClassifier(cfg))

    def named(self) -> dict:
        return {"content_encoder": self.content_encoder, "style_encoder": self.style_encoder,
                "decoder": self.decoder, "classifier": self.classifier}

    def parameters(self):
        for net in self.named().values():
            yield from net.parameters()

    def train(self):
        for net in self.named().values():
            net.train()

    def eval(self):
        for net in self.named().values():
            net.eval()


def _stack(images) -> Tensor:
    return torch.from_numpy(np.stack(images)).float()


def _pair_tensors(batch: list[PairedSample]):
    """Mirrored roles: each pair contributes (x, y) and (y, x)."""
    xs = _stack([p.x for p in batch] + [p.y for p in batch])
    ys = _stack([p.y for p in batch] + [p.x for p in batch])
    l_x = torch.tensor([p.l_x for p in batch] + [p.l_y for p in batch])
    x_s = _stack([p.x_s for p in batch] + [p.y_s for p in batch])[:, None]
    return xs, ys, l_x, x_s


def stage1_losses(batch: list[PairedSample], nets: Stage1Nets, cfg: Stage1Config,
                  backbone, unary: list | None = None) -> dict[str, Tensor]:
    """All four loss terms for one batch (optionally plus a unary batch)."""
    xs, ys, l_x, x_s = _pair_tensors(batch)
    c_x = nets.content_encoder(xs)
    c_y = nets.content_encoder(ys)
    s_x = nets.style_encoder(xs)
    x_bar, seg_x = nets.decoder(c_x, s_x, l_x)
    seg_from_y = nets.decoder.predict_shape(c_y, l_x)
    logits = nets.classifier(gradient_reversal(c_x))

    arec = loss_appearance_rec(xs, x_bar, backbone)
    srec = loss_shape_rec(seg_x, x_s, cfg.lambda_s)
    dis = loss_dis(c_x, c_y, seg_from_y, x_s, cfg.lambda_s)
    reg = loss_reg(c_x, logits, l_x, cfg.lambda_r)

    if unary:
        u_img = _stack([u[0] for u in unary])
        u_lab = torch.tensor([u[1] for u in unary])
        u_seg = _stack([u[2] for u in unary])[:, None]
        c_u = nets.content_encoder(u_img)
        u_bar, u_segp = nets.decoder(c_u, nets.style_encoder(u_img), u_lab)
        u_logits = nets.classifier(gradient_reversal(c_u))
        arec = 0.5 * (arec + loss_appearance_rec(u_img, u_bar, backbone))
        srec = 0.5 * (srec + loss_shape_rec(u_segp, u_seg, cfg.lambda_s))
        reg = 0.5 * (reg + loss_reg(c_u, u_logits, u_lab, cfg.lambda_r))

    return {"arec": arec, "srec": srec, "dis": dis, "reg": reg}


def stage1_step(batch: list[PairedSample], nets: Stage1Nets, cfg: Stage1Config,
                optimizer: torch.optim.Optimizer, backbone,
                unary: list | None = None) -> dict[str, float]:
    """One optimizer step on the four-term objective; returns per-term floats."""
    if not batch:
        raise ValueError("empty batch")
    nets.train()
    report = stage1_losses(batch, nets, cfg, backbone, unary)
    _check_finite(report)
    optimizer.zero_grad()
    total = report["arec"] + report["srec"] + report["dis"] + report["reg"]
    total.backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in report.items()}


class Stage1Trainer:
    """Drives the distillation loop over a factory-backed dataset."""

    def __init__(self, model_cfg: ModelConfig, cfg: Stage1Config,
                 manifest: DatasetManifest, backbone=None, seed: int = 0):
        if len(manifest.domains) < 2:
            raise ValueError("need at least two domains")
        torch.manual_seed(seed)
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.manifest = manifest
        self.backbone = backbone if backbone is not None else FrozenPyramidBackbone()
        self.rng = np.random.default_rng(seed)
        self.nets = Stage1Nets.build(model_cfg)
        self.optimizer = torch.optim.Adam(self.nets.parameters(), lr=cfg.lr,
                                          betas=(cfg.beta1, cfg.beta2))
        self.cache = RenderCache(manifest)

    def _sample_pairs(self, n: int) -> list[PairedSample]:
        out = []
        domains = self.manifest.domains
        seeds = self.manifest.train_seeds
        for _ in range(n):
            seed = int(seeds[self.rng.integers(len(seeds))])
            i, j = self.rng.choice(len(domains), size=2, replace=False)
            di, dj = domains[i], domains[j]
            x, x_s, ann_x = self.cache.get(di.id, seed)
            y, y_s, ann_y = self.cache.get(dj.id, seed)
            out.append(PairedSample(x, y, di.id, dj.id, x_s, y_s, ann_x, ann_y, seed))
        return out

    def _sample_unary(self, n: int) -> list:
        out = []
        domains = self.manifest.domains
        seeds = self.manifest.train_seeds
        for _ in range(n):
            seed = int(seeds[self.rng.integers(len(seeds))])
            d = domains[self.rng.integers(len(domains))]
            img, seg, _ = self.cache.get(d.id, seed)
            out.append((img, d.id, seg))
        return out

    def step(self) -> dict[str, float]:
        batch = self._sample_pairs(self.cfg.batch_size)
        unary = None
        if self.rng.random() < self.cfg.unary_real_fraction:
            unary = self._sample_unary(self.cfg.batch_size)
        return stage1_step(batch, self.nets, self.cfg, self.optimizer, self.backbone, unary)

    def run(self, iterations: int | None = None, log_path: str | None = None,
            progress: bool = False) -> list[dict[str, float]]:
        iterations = self.cfg.iterations if iterations is None else iterations
        history = []
        writer = None
        fh = None
        if log_path:
            os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
            fh = open(log_path, "w", newline="", encoding="utf-8")
            writer = csv.writer(fh)
            writer.writerow(("iteration",) + STAGE1_LOSS_KEYS)
        try:
            for it in range(iterations):
                report = self.step()
                history.append(report)
                if writer and (it % self.cfg.log_every == 0 or it == iterations - 1):
                    writer.writerow([it] + [f"{report[k]:.6f}" for k in STAGE1_LOSS_KEYS])
                if progress and it % 100 == 0:
                    print(f"stage1 iter {it}: " +
                          " ".join(f"{k}={report[k]:.4f}" for k in STAGE1_LOSS_KEYS))
        finally:
            if fh:
                fh.close()
        return history

    def save(self, path: str):
        from .checkpoint import save_checkpoint
        save_checkpoint(path, self.nets.named(), self.model_cfg, {"stage": 1})


def load_stage1_nets(path: str) -> tuple[ModelConfig, Stage1Nets]:
    from .checkpoint import load_checkpoint, load_net
    model_cfg, extra, arrays = load_checkpoint(path)
    if extra.get("stage") not in ("1", "2"):
        raise ValueError("not a training checkpoint")
    nets = Stage1Nets.build(model_cfg)
    for name in ("content_encoder", "style_encoder"):
        load_net(getattr(nets, name), name, arrays)
    # decoder / classifier only exist in stage-1 checkpoints
    if "decoder/to_rgb/weight" in arrays:
        load_net(nets.decoder, "decoder", arrays)
        load_net(nets.classifier, "classifier", arrays)
    return model_cfg, nets


# --- held-out diagnostics ----------------------------------------------------

@torch.no_grad()
def paired_content_gap(nets: Stage1Nets, manifest: DatasetManifest,
                       n_pairs: int = 32, seed: int = 123) -> tuple[float, float]:
    """Mean |E_c(x) - E_c(y)| over held-out pairs vs mismatched pairs."""
    nets.eval()
    rng = np.random.default_rng(seed)
    seeds = manifest.heldout_seeds or manifest.seeds
    domains = manifest.domains
    paired, mismatched = [], []
    for _ in range(n_pairs):
        i, j = rng.choice(len(domains), size=2, replace=False)
        s1 = int(seeds[rng.integers(len(seeds))])
        s2 = int(seeds[rng.integers(len(seeds))])
        while s2 == s1:
            s2 = int(seeds[rng.integers(len(seeds))])
        p = make_pair(s1, domains[i], domains[j], manifest.image_size)
        q = make_pair(s2, domains[i], domains[j], manifest.image_size)
        c_x = nets.content_encoder(_stack([p.x]))
        c_y = nets.content_encoder(_stack([p.y]))
        c_y2 = nets.content_encoder(_stack([q.y]))
        paired.append(float((c_x - c_y).abs().mean()))
        mismatched.append(float((c_x - c_y2).abs().mean()))
    return float(np.mean(paired)), float(np.mean(mismatched))


@torch.no_grad()
def heldout_shape_iou(nets: Stage1Nets, manifest: DatasetManifest,
                      n_images: int = 32, seed: int = 321) -> float:
    """Mean IoU of the shape branch against factory masks on held-out images."""
    nets.eval()
    rng = np.random.default_rng(seed)
    seeds = manifest.heldout_seeds or manifest.seeds
    cache = RenderCache(manifest)
    ious = []
    for _ in range(n_images):
        d = manifest.domains[rng.integers(len(manifest.domains))]
        s = int(seeds[rng.integers(len(seeds))])
        img, seg, _ = cache.get(d.id, s)
        content = nets.content_encoder(_stack([img]))
        pred = nets.decoder.predict_shape(content, torch.tensor([d.id]))[0, 0]
        p = pred.numpy() >= 0.5
        t = seg >= 0.5
        union = np.logical_or(p, t).sum()
        ious.append(float(np.logical_and(p, t).sum() / union) if union else 1.0)
    return float(np.mean(ious))
