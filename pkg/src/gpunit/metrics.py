"""Quantitative evaluation: proxy Frechet distance, output diversity,
style/content consistency and orientation-consistency accuracy.

All metrics run against a pluggable frozen backbone; with the random-feature
stand-in only orderings and trends are meaningful, not absolute values.
"""

from __future__ import annotations

import numpy as np
import torch

from .backbones import FrozenPyramidBackbone
from .factory import DatasetManifest, RenderCache, estimate_head_tail

CONTENT_LAYER = "p4"
STYLE_LAYERS = ("p1", "p2", "p3")


def _as_batch(images) -> torch.Tensor:
    if torch.is_tensor(images):
        t = images.float()
    else:
        t = torch.from_numpy(np.stack([np.asarray(im) for im in images])).float()
    return t if t.dim() == 4 else t[None]


@torch.no_grad()
def pooled_features(images, backbone) -> np.ndarray:
    return backbone.pooled(_as_batch(images)).detach().cpu().numpy().astype(np.float64)


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_features(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    """Frechet gap between the Gaussian fits of two feature sets.

    The cross-covariance square root is taken through an eigendecomposition of
    the symmetrized product with negative eigenvalues clipped at zero.
    """
    feat_a = np.asarray(feat_a, dtype=np.float64)
    feat_b = np.asarray(feat_b, dtype=np.float64)
    mu_a, mu_b = feat_a.mean(axis=0), feat_b.mean(axis=0)
    cov_a = np.cov(feat_a, rowvar=False)
    cov_b = np.cov(feat_b, rowvar=False)
    sqrt_a = _sym_sqrt(cov_a)
    cross = _sym_sqrt(sqrt_a @ cov_b @ sqrt_a)
    value = float(((mu_a - mu_b) ** 2).sum()
                  + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def frechet_distance(set_a, set_b, backbone) -> float:
    """Proxy Frechet distance between two image sets on pooled features."""
    return frechet_from_features(pooled_features(set_a, backbone),
                                 pooled_features(set_b, backbone))


def diversity(outputs_per_input: list, backbone) -> float:
    """Mean pairwise pooled-feature distance within each input's output set,
    averaged over inputs.  Permutation-invariant within sets."""
    per_input = []
    for outputs in outputs_per_input:
        feats = pooled_features(outputs, backbone)
        n = feats.shape[0]
        if n < 2:
            per_input.append(0.0)
            continue
        dists = [float(np.linalg.norm(feats[i] - feats[j]))
                 for i in range(n) for j in range(i + 1, n)]
        per_input.append(float(np.mean(dists)))
    if not per_input:
        raise ValueError("no output sets given")
    return float(np.mean(per_input))


@torch.no_grad()
def consistency_metrics(x, y, y_hat, backbone,
                        content_layer: str = CONTENT_LAYER,
                        style_layers: tuple[str, ...] = STYLE_LAYERS) -> dict[str, float]:
    """Content gap to the source and style-statistic gap to the exemplar.

    content: mean-squared deep-feature distance between y_hat and x.
    style: mean-squared gap of channel-wise (mean, std) feature statistics
    between y_hat and y, summed over the configured layers.
    """
    tx, ty, tyh = _as_batch([x]), _as_batch([y]), _as_batch([y_hat])
    f_x = backbone.features(tx, layers=(content_layer,))[0]
    f_yh_deep = backbone.features(tyh, layers=(content_layer,))[0]
    content = float(((f_yh_deep - f_x) ** 2).mean())

    style = 0.0
    feats_y = backbone.features(ty, layers=style_layers)
    feats_yh = backbone.features(tyh, layers=style_layers)
    for fy, fyh in zip(feats_y, feats_yh):
        mu_y, mu_yh = fy.mean(dim=(2, 3)), fyh.mean(dim=(2, 3))
        sd_y = fy.std(dim=(2, 3), unbiased=False)
        sd_yh = fyh.std(dim=(2, 3), unbiased=False)
        style += float(((mu_yh - mu_y) ** 2).mean() + ((sd_yh - sd_y) ** 2).mean())
    return {"style": style, "content": content}


def orientation_accuracy(results: list, head_tail_source, head_tail_translated=None) -> float:
    """Fraction of (content, translated) pairs whose horizontal head-vs-tail
    ordering agrees.  ``head_tail_*`` map an image to {"head": (row, col),
    "tail": (row, col)} or None; an undetectable pair counts as inconsistent.
    """
    if not results:
        raise ValueError("no results to score")
    head_tail_translated = head_tail_translated or head_tail_source
    matches = 0
    for x, y_hat in results:
        a = head_tail_source(x)
        b = head_tail_translated(y_hat)
        if a is None or b is None:
            continue
        sign_a = np.sign(a["head"][1] - a["tail"][1])
        sign_b = np.sign(b["head"][1] - b["tail"][1])
        if sign_a == sign_b and sign_a != 0:
            matches += 1
    return matches / len(results)


def head_tail_from_predictor(predictor, backbone, image_size: int):
    """Adapts a trained label predictor into a head/tail locator on images."""
    from .semi import map_centroids, predict_label_map

    @torch.no_grad()
    def locate(image) -> dict | None:
        t = _as_batch([image])
        label_map = predict_label_map(predictor, backbone, t)[0]
        cents = map_centroids(label_map)
        if cents["head"] is None or cents["tail"] is None:
            return None
        scale = image_size / label_map.shape[-1]
        return {k: (float(v[0]) * scale, float(v[1]) * scale) for k, v in cents.items()}

    return locate


def _np_image(t) -> np.ndarray:
    if torch.is_tensor(t):
        return t.detach().cpu().numpy()
    return np.asarray(t)


@torch.no_grad()
def evaluate_model(nets, manifest: DatasetManifest, n_eval: int = 12, seed: int = 777,
                   styles_per_image: int = 4) -> dict[str, float]:
    """Builds the standard report over held-out data: translations between the
    manifest's first two domains, scored both ways."""
    from .stage2 import translate

    backbone = nets.backbone if isinstance(nets.backbone, FrozenPyramidBackbone) \
        else FrozenPyramidBackbone()
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    cache = RenderCache(manifest)
    held = manifest.heldout_seeds or manifest.seeds
    d_a, d_b = manifest.domains[0], manifest.domains[1]

    translated, real_targets, pairs, cons = [], [], [], []
    spreads = []
    for k in range(n_eval):
        src, dst = (d_a, d_b) if k % 2 == 0 else (d_b, d_a)
        sx = int(held[rng.integers(len(held))])
        sy = int(held[rng.integers(len(held))])
        x = torch.from_numpy(cache.get(src.id, sx)[0]).float()
        y = torch.from_numpy(cache.get(dst.id, sy)[0]).float()
        ell = 0.5 if nets.controllable else None
        y_hat, _ = translate(x, nets.style_encoder(y), nets, ell=ell)
        translated.append(y_hat.numpy())
        real_targets.append(cache.get(dst.id, sy)[0])
        pairs.append((_np_image(x), _np_image(y_hat)))
        cons.append(consistency_metrics(x, y, y_hat, backbone))
        outs = []
        g = torch.Generator().manual_seed(seed * 1000 + k)
        for _ in range(styles_per_image):
            z = torch.randn(1, nets.mapping.style_dim, generator=g)
            s = nets.mapping(z)[0]
            out, _ = translate(x, s, nets, ell=ell)
            outs.append(out.numpy())
        spreads.append(outs)

    return {
        "fid_proxy": frechet_distance(translated, real_targets, backbone),
        "diversity": diversity(spreads, backbone),
        "style": float(np.mean([c["style"] for c in cons])),
        "content": float(np.mean([c["content"] for c in cons])),
        "orientation_accuracy": orientation_accuracy(pairs, estimate_head_tail),
    }
