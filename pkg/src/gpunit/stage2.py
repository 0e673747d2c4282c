"""Stage II: adversarial translation on top of the frozen content encoder.

The generator modulates the content code with the exemplar's style through
AdaIN and pulls encoder mid-features in through the dynamic skip layers.  In
controllable mode the skip layers and the consistency losses are conditioned
on a knob ``ell`` sampled from a five-point grid each iteration; in
semi-supervised mode frozen per-domain label predictors add a clamped
centroid position loss and the generator's first layer additionally consumes
a frozen backbone feature.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .backbones import (FrozenIdentityEmbedder, FrozenPyramidBackbone,
                        perceptual_distance)
from .config import ModelConfig, SemiConfig, Stage2Config
from .dynamic_skip import mask_sparsity
from .factory import DatasetManifest, RenderCache
from .networks import (ContentEncoder, Discriminator, Generator, MappingNetwork,
                       StyleEncoder)
from .semi import (LabelPredictor, inject_semantic_prior, loss_position,
                   map_centroids, predict_label_map, train_label_predictor)
from .stage1 import NonFiniteLossError, _check_finite, _stack, load_stage1_nets

ELL_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


# --- losses ------------------------------------------------------------------

def loss_adversarial(discriminator, y: Tensor, y_hat: Tensor, label: Tensor,
                     role: str) -> Tensor:
    """Non-saturating GAN loss for the requested side.

    ``role="discriminator"``: push real logits up, fake logits down (fake side
    detached by the caller).  ``role="generator"``: push fake logits up.
    """
    if role == "discriminator":
        logit_real, _ = discriminator(y, label)
        logit_fake, _ = discriminator(y_hat, label)
        return (F.softplus(-logit_real) + F.softplus(logit_fake)).mean()
    if role == "generator":
        logit_fake, _ = discriminator(y_hat, label)
        return F.softplus(-logit_fake).mean()
    raise ValueError(f"role must be 'generator' or 'discriminator', got {role!r}")


def loss_style(f_d_yhat: Tensor, f_d_y: Tensor) -> Tensor:
    """Mean absolute gap between discriminator style features."""
    if f_d_yhat.shape != f_d_y.shape:
        raise ValueError("style feature lengths must match")
    return (f_d_yhat - f_d_y).abs().mean()


def loss_content(c_yhat: Tensor, c_x: Tensor) -> Tensor:
    """Mean absolute gap between content codes (encoder in eval mode)."""
    return (c_yhat - c_x).abs().mean()


def loss_reconstruction(y: Tensor, y_bar: Tensor, backbone) -> Tensor:
    """L1 pixel error plus feature-space distance; symmetric."""
    if y.shape != y_bar.shape:
        raise ValueError("image shapes must match")
    return (y - y_bar).abs().mean() + perceptual_distance(y, y_bar, backbone)


def loss_content_consistency_feat(f_e_yhat: list[Tensor], f_e_x: list[Tensor],
                                  ell: float, lambda_cc_per_layer) -> Tensor:
    """ell-weighted per-layer mean-squared encoder feature gap."""
    if len(f_e_yhat) != len(f_e_x):
        raise ValueError("feature lists must align by layer")
    if len(lambda_cc_per_layer) != len(f_e_yhat):
        raise ValueError("one weight per encoder stage required")
    total = torch.zeros(())
    for w, fy, fx in zip(lambda_cc_per_layer, f_e_yhat, f_e_x):
        if w == 0:
            continue
        total = total + w * F.mse_loss(fy, fx)
    return ell * total


def loss_content_consistency_id(y_hat: Tensor, x: Tensor, y: Tensor, ell: float,
                                lambda_cc: float, embedder) -> Tensor:
    """Identity-metric blend: lambda_cc * ell * ID(y_hat, x) + (1 - ell) * ID(y_hat, y)."""
    return (lambda_cc * ell * embedder.id_distance(y_hat, x)
            + (1.0 - ell) * embedder.id_distance(y_hat, y)).mean()


# --- network bundle ----------------------------------------------------------

@dataclass
class TranslationNets:
    """Everything needed for translation inference and training."""

    model_cfg: ModelConfig
    content_encoder: ContentEncoder
    style_encoder: StyleEncoder
    generator: Generator
    discriminator: Discriminator
    mapping: MappingNetwork
    backbone: FrozenPyramidBackbone = field(default_factory=FrozenPyramidBackbone)
    prior_layer: str = "p2"

    def __post_init__(self):
        self.content_encoder.requires_grad_(False)
        self.content_encoder.eval()

    @property
    def controllable(self) -> bool:
        return self.generator.conditional

    @property
    def prior_channels(self) -> int:
        return self.generator.prior_channels

    @classmethod
    def build(cls, model_cfg: ModelConfig, stage1_nets=None, controllable: bool = False,
              semi: bool = False, backbone: FrozenPyramidBackbone | None = None,
              prior_layer: str = "p2") -> "TranslationNets":
        backbone = backbone if backbone is not None else FrozenPyramidBackbone()
        prior_channels = backbone.channels(prior_layer) if semi else 0
        content = stage1_nets.content_encoder if stage1_nets else ContentEncoder(model_cfg)
        style = stage1_nets.style_encoder if stage1_nets else StyleEncoder(model_cfg)
        return cls(model_cfg, content, style,
                   Generator(model_cfg, prior_channels=prior_channels, conditional=controllable),
                   Discriminator(model_cfg), MappingNetwork(model_cfg.style_dim),
                   backbone=backbone, prior_layer=prior_layer)

    def named(self) -> dict:
        return {"content_encoder": self.content_encoder, "style_encoder": self.style_encoder,
                "generator": self.generator, "discriminator": self.discriminator,
                "mapping": self.mapping}

    def generator_side_parameters(self):
        yield from self.style_encoder.parameters()
        yield from self.generator.parameters()

    def content_input(self, x: Tensor, enc_feats: list[Tensor]) -> Tensor:
        content = enc_feats[-1]
        if self.prior_channels == 0:
            return content
        prior = self.backbone.features(x, layers=(self.prior_layer,))[0]
        return inject_semantic_prior(content, prior)


def translate(x: Tensor, style: Tensor, nets: TranslationNets, ell: float | None = None,
              task: str = "tran", force_zero_masks: bool = False) -> tuple[Tensor, list[Tensor]]:
    """Translates content image(s) ``x`` under a style code.

    Accepts a single (3,S,S) image or a (B,3,S,S) batch; returns the image(s)
    in [0,1] plus one skip mask per configured layer.
    """
    if nets.controllable and ell is None:
        raise ValueError("this model is consistency-conditioned: pass ell in [0, 1]")
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
        if style.dim() == 1:
            style = style[None]
    feats = nets.content_encoder.features(x)
    y_hat, masks = nets.generator(nets.content_input(x, feats), style, feats,
                                  ell=ell, task=task, force_zero_masks=force_zero_masks)
    if squeeze:
        return y_hat[0], [m[0] for m in masks]
    return y_hat, masks


def train_mapping_network(styles: Tensor, net: MappingNetwork, iterations: int = 400,
                          n_samples: int = 16, batch_size: int = 16, lr: float = 1e-3,
                          seed: int = 0) -> MappingNetwork:
    """Fits the noise-to-style map by pulling, for each observed style code,
    the nearest of ``n_samples`` mapped Gaussian draws toward it (L2)."""
    if styles.numel() == 0 or styles.shape[0] == 0:
        raise ValueError("need at least one style code")
    styles = styles.detach()
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(iterations):
        idx = torch.randint(styles.shape[0], (min(batch_size, styles.shape[0]),), generator=g)
        target = styles[idx]
        z = torch.randn(n_samples, net.style_dim, generator=g)
        mapped = net(z)
        d = torch.cdist(target, mapped)
        nearest = d.min(dim=1).values
        loss = (nearest ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return net


# --- trainer -----------------------------------------------------------------

STAGE2_LOSS_KEYS = ("adv_d", "adv_g", "con", "sty", "msk", "rec")


class Stage2Trainer:
    """Alternating D / (G, E_s) training over factory domains."""

    def __init__(self, model_cfg: ModelConfig, cfg: Stage2Config, manifest: DatasetManifest,
                 stage1_ckpt: str | None = None, stage1_nets=None,
                 semi_cfg: SemiConfig | None = None,
                 labeled: dict[int, tuple[Tensor, list]] | None = None,
                 backbone: FrozenPyramidBackbone | None = None,
                 embedder: FrozenIdentityEmbedder | None = None, seed: int = 0):
        if stage1_nets is None:
            if stage1_ckpt is None:
                raise ValueError("stage-II training requires a stage-I checkpoint")
            loaded_cfg, stage1_nets = load_stage1_nets(stage1_ckpt)
            if loaded_cfg != model_cfg:
                model_cfg = loaded_cfg
        cfg.validate_against(model_cfg)
        torch.manual_seed(seed)
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.semi_cfg = semi_cfg or SemiConfig()
        self.manifest = manifest
        self.rng = np.random.default_rng(seed)
        self.nets = TranslationNets.build(
            model_cfg, stage1_nets=stage1_nets, controllable=cfg.controllable,
            semi=cfg.semi_supervised, backbone=backbone,
            prior_layer=self.semi_cfg.prior_inject_layer)
        self.embedder = embedder if embedder is not None else FrozenIdentityEmbedder()
        self.cache = RenderCache(manifest)
        self.opt_g = torch.optim.Adam(self.nets.generator_side_parameters(), lr=cfg.lr,
                                      betas=(cfg.beta1, cfg.beta2))
        self.opt_d = torch.optim.Adam(self.nets.discriminator.parameters(), lr=cfg.d_lr,
                                      betas=(cfg.beta1, cfg.beta2))
        self.predictors: dict[int, LabelPredictor] = {}
        if cfg.semi_supervised:
            if not labeled:
                raise ValueError("semi-supervised training requires labeled annotations")
            for domain_id, (images, anns) in labeled.items():
                self.predictors[domain_id] = train_label_predictor(
                    images, anns, self.nets.backbone, self.semi_cfg, seed=seed)

    def _sample_batch(self, n: int):
        domains = self.manifest.domains
        seeds = self.manifest.train_seeds
        i, j = self.rng.choice(len(domains), size=2, replace=False)
        dx, dy = domains[i], domains[j]
        xs, ys = [], []
        for _ in range(n):
            sx = int(seeds[self.rng.integers(len(seeds))])
            sy = int(seeds[self.rng.integers(len(seeds))])
            xs.append(self.cache.get(dx.id, sx)[0])
            ys.append(self.cache.get(dy.id, sy)[0])
        return _stack(xs), _stack(ys), dx.id, dy.id

    def _position_loss(self, x: Tensor, y_hat: Tensor, l_x: int, l_y: int) -> Tensor | None:
        if l_x not in self.predictors or l_y not in self.predictors:
            return None
        with torch.no_grad():
            maps_x = predict_label_map(self.predictors[l_x], self.nets.backbone, x)
        maps_yhat = predict_label_map(self.predictors[l_y], self.nets.backbone, y_hat)
        if self.semi_cfg.position_mode == "maps_l2":
            # ablation: penalize raw map changes instead of centroid shifts
            return self.semi_cfg.lambda_P * F.mse_loss(maps_yhat, maps_x)
        terms = []
        for b in range(x.shape[0]):
            c_x = map_centroids(maps_x[b])
            c_yhat = map_centroids(maps_yhat[b])
            terms.append(loss_position(c_x, c_yhat, self.semi_cfg))
        return torch.stack(terms).mean()

    def step(self) -> dict[str, float]:
        cfg = self.cfg
        nets = self.nets
        nets.style_encoder.train()
        nets.generator.train()
        nets.discriminator.train()
        x, y, l_x, l_y = self._sample_batch(cfg.batch_size)
        label_y = torch.full((x.shape[0],), l_y, dtype=torch.long)
        ell = float(self.rng.choice(ELL_GRID)) if cfg.controllable else None

        s_y = nets.style_encoder(y)
        y_hat, masks = translate(x, s_y, nets, ell=ell, task="tran")

        # discriminator side
        d_loss = loss_adversarial(nets.discriminator, y, y_hat.detach(), label_y,
                                  role="discriminator")
        self.opt_d.zero_grad()
        d_loss.backward()
        self.opt_d.step()

        # generator side
        logit_fake, f_d_fake = nets.discriminator(y_hat, label_y)
        with torch.no_grad():
            _, f_d_real = nets.discriminator(y, label_y)
            c_x = nets.content_encoder(x)
        adv_g = F.softplus(-logit_fake).mean()
        con = loss_content(nets.content_encoder(y_hat), c_x)
        sty = loss_style(f_d_fake, f_d_real)
        msk = mask_sparsity(masks)

        y_bar, _ = translate(y, s_y, nets, ell=ell, task="rec",
                             force_zero_masks=(not cfg.controllable and not cfg.use_dsc_for_rec))
        rec = loss_reconstruction(y, y_bar, nets.backbone)

        total = (adv_g + cfg.lambda_1 * con + cfg.lambda_2 * sty
                 + cfg.lambda_3 * msk + cfg.lambda_4 * rec)
        report = {"adv_d": d_loss, "adv_g": adv_g, "con": con, "sty": sty,
                  "msk": msk, "rec": rec}

        if cfg.controllable:
            feats_yhat = nets.content_encoder.features(y_hat)
            with torch.no_grad():
                feats_x = nets.content_encoder.features(x)
            cc = loss_content_consistency_feat(feats_yhat, feats_x, ell,
                                               cfg.lambda_cc_per_layer)
            if cfg.lambda_cc_id > 0:
                cc = cc + loss_content_consistency_id(y_hat, x, y, ell,
                                                      cfg.lambda_cc_id, self.embedder)
            total = total + cc
            report["cc"] = cc

        if cfg.identity_weight > 0:
            id_term = cfg.identity_weight * self.embedder.id_distance(y_hat, y).mean()
            total = total + id_term
            report["id"] = id_term

        if cfg.semi_supervised:
            pos = self._position_loss(x, y_hat, l_x, l_y)
            if pos is not None:
                total = total + pos
                report["pos"] = pos

        _check_finite(report)
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()
        return {k: float(v.detach()) for k, v in report.items()}

    def run(self, iterations: int | None = None, log_path: str | None = None,
            progress: bool = False, fit_mapping: bool = True) -> list[dict[str, float]]:
        iterations = self.cfg.iterations if iterations is None else iterations
        history = []
        writer = None
        fh = None
        keys = None
        if log_path:
            os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
            fh = open(log_path, "w", newline="", encoding="utf-8")
            writer = csv.writer(fh)
        try:
            for it in range(iterations):
                report = self.step()
                history.append(report)
                if writer:
                    if keys is None:
                        keys = list(report)
                        writer.writerow(["iteration"] + keys)
                    if it % self.cfg.log_every == 0 or it == iterations - 1:
                        writer.writerow([it] + [f"{report[k]:.6f}" for k in keys])
                if progress and it % 100 == 0:
                    print(f"stage2 iter {it}: " +
                          " ".join(f"{k}={v:.4f}" for k, v in report.items()))
        finally:
            if fh:
                fh.close()
        if fit_mapping:
            self.fit_mapping_network()
        return history

    def harvest_styles(self, per_domain: int = 24) -> Tensor:
        """Style codes of training images across all domains."""
        seeds = self.manifest.train_seeds
        out = []
        with torch.no_grad():
            for d in self.manifest.domains:
                take = [int(seeds[k % len(seeds)]) for k in range(per_domain)]
                imgs = _stack([self.cache.get(d.id, s)[0] for s in take])
                out.append(self.nets.style_encoder(imgs))
        return torch.cat(out)

    def fit_mapping_network(self):
        styles = self.harvest_styles()
        train_mapping_network(styles, self.nets.mapping,
                              iterations=self.cfg.mapping_iterations,
                              n_samples=self.cfg.mapping_samples,
                              seed=int(self.rng.integers(2 ** 31)))

    def save(self, path: str):
        from .checkpoint import save_checkpoint
        save_checkpoint(path, self.nets.named(), self.model_cfg,
                        {"stage": 2, "controllable": int(self.cfg.controllable),
                         "prior_channels": self.nets.prior_channels,
                         "prior_layer": self.nets.prior_layer})


def load_translation_nets(path: str) -> TranslationNets:
    from .checkpoint import load_checkpoint, load_net
    model_cfg, extra, arrays = load_checkpoint(path)
    if extra.get("stage") != "2":
        raise ValueError("not a translation checkpoint (stage 2)")
    controllable = bool(int(extra.get("controllable", "0")))
    prior_channels = int(extra.get("prior_channels", "0"))
    prior_layer = extra.get("prior_layer", "p2")
    backbone = FrozenPyramidBackbone()
    nets = TranslationNets(
        model_cfg, ContentEncoder(model_cfg), StyleEncoder(model_cfg),
        Generator(model_cfg, prior_channels=prior_channels, conditional=controllable),
        Discriminator(model_cfg), MappingNetwork(model_cfg.style_dim),
        backbone=backbone, prior_layer=prior_layer)
    for name, net in nets.named().items():
        load_net(net, name, arrays)
    return nets
