import math

import numpy as np
import pytest
import torch

from gpunit.backbones import FrozenPyramidBackbone
from gpunit.config import SemiConfig
from gpunit.semi import (LabelAnnotation, LabelPredictor, centroid,
                         inject_semantic_prior, loss_label, loss_position,
                         map_centroids, predict_label_map, render_label_map,
                         train_label_predictor)

from conftest import assert_grads_match


def ann(points, radius=3, image_id="img"):
    return LabelAnnotation(image_id, radius, points)


class TestRenderLabelMap:
    def test_radius_zero_sets_single_pixel(self):
        m = render_label_map(ann([{"kind": "head", "x": 4, "y": 5}], radius=0), (10, 10))
        assert m.shape == (2, 10, 10)
        assert m[0].sum() == 1.0 and m[0, 5, 4] == 1.0
        assert m[1].sum() == 0.0

    def test_no_points_all_zero(self):
        m = render_label_map(ann([]), (8, 8))
        assert m.abs().sum() == 0.0

    def test_pixel_count_matches_enumeration_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            h, w = int(rng.integers(8, 24)), int(rng.integers(8, 24))
            x, y = int(rng.integers(0, w)), int(rng.integers(0, h))
            r = int(rng.integers(0, 6))
            m = render_label_map(ann([{"kind": "tail", "x": x, "y": y}], radius=r), (h, w))
            expected = sum(1 for i in range(h) for j in range(w)
                           if (i - y) ** 2 + (j - x) ** 2 <= r ** 2)
            assert int(m[1].sum()) == expected

    def test_values_binary(self):
        m = render_label_map(ann([{"kind": "head", "x": 3, "y": 3},
                                  {"kind": "tail", "x": 9, "y": 9}], radius=2), (12, 12))
        assert set(torch.unique(m).tolist()) <= {0.0, 1.0}

    def test_one_point_per_kind_enforced(self):
        with pytest.raises(ValueError):
            ann([{"kind": "head", "x": 1, "y": 1}, {"kind": "head", "x": 2, "y": 2}])


class TestLossLabel:
    def test_identical_maps_zero(self):
        m = render_label_map(ann([{"kind": "head", "x": 4, "y": 4}]), (12, 12))
        assert float(loss_label(m, m, 250.0)) == pytest.approx(0.0, abs=1e-9)

    def test_constant_half_maps_zero(self):
        p = torch.full((2, 6, 6), 0.5)
        assert float(loss_label(p, p.clone(), 250.0)) == pytest.approx(0.0, abs=1e-9)

    def test_hand_sized_case_matches_direct_formula(self):
        # independent numpy evaluation of lambda_P * MSE + mean-per-channel KL
        pred = torch.tensor([[[0.8, 0.2], [0.4, 0.6]], [[0.5, 0.5], [0.1, 0.9]]])
        truth = torch.tensor([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 1.0], [0.0, 0.0]]])
        lam, eps = 250.0, 1e-6
        p, q = pred.numpy(), truth.numpy()
        mse = np.mean((p - q) ** 2)
        kls = []
        for ch in range(2):
            a = p[ch].ravel() + eps
            b = q[ch].ravel() + eps
            a, b = a / a.sum(), b / b.sum()
            kls.append(np.sum(a * np.log(a / b)))
        expected = lam * mse + np.mean(kls)
        assert float(loss_label(pred, truth, lam)) == pytest.approx(expected, rel=1e-5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            loss_label(torch.zeros(2, 4, 4), torch.zeros(2, 5, 5), 1.0)

    def test_gradients_match_finite_differences(self):
        gen = torch.Generator().manual_seed(2)
        pred = torch.rand(2, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True)
        truth = torch.rand(2, 3, 3, generator=gen, dtype=torch.float64)
        assert_grads_match(lambda: loss_label(pred, truth, 250.0), [pred])


class TestCentroid:
    def test_uniform_map_center(self):
        r, c = centroid(torch.ones(7, 5))
        assert float(r) == pytest.approx(3.0) and float(c) == pytest.approx(2.0)

    def test_single_spike(self):
        m = torch.zeros(8, 8)
        m[3, 5] = 2.0
        r, c = centroid(m)
        assert (float(r), float(c)) == (3.0, 5.0)

    def test_two_equal_spikes(self):
        m = torch.zeros(9, 9)
        m[0, 0] = 1.0
        m[0, 8] = 1.0
        r, c = centroid(m)
        assert (float(r), float(c)) == (0.0, 4.0)

    def test_zero_mass_returns_none(self):
        assert centroid(torch.zeros(4, 4)) is None

    def test_negative_mass_rejected(self):
        m = torch.zeros(4, 4)
        m[1, 1] = -0.5
        with pytest.raises(ValueError):
            centroid(m)

    def test_matches_brute_force_on_random_maps(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            arr = rng.random((int(rng.integers(3, 12)), int(rng.integers(3, 12))))
            r, c = centroid(torch.tensor(arr, dtype=torch.float64))
            total = rr = cc = 0.0
            for i in range(arr.shape[0]):
                for j in range(arr.shape[1]):
                    total += arr[i, j]
                    rr += arr[i, j] * i
                    cc += arr[i, j] * j
            assert abs(float(r) - rr / total) <= 1e-9
            assert abs(float(c) - cc / total) <= 1e-9


class TestLossPosition:
    CFG = SemiConfig()

    def test_identical_centroids_zero(self):
        c = {"head": (2.0, 3.0), "tail": (5.0, 1.0)}
        assert float(loss_position(c, dict(c), self.CFG)) == 0.0

    def test_horizontal_gap_clamps_at_tau(self):
        a = {"head": (0.0, 0.0), "tail": None}
        b = {"head": (0.0, 5.0), "tail": None}
        # head: horizontal gap 5 -> min(25, 16) = 16; missing tail -> (1 + 0.1) * 16
        expected = 1.0 * 16.0 + (1.0 + 0.1) * 16.0
        assert float(loss_position(a, b, self.CFG)) == pytest.approx(expected)

    def test_vertical_gap_weighted_lower(self):
        a = {"head": (0.0, 0.0), "tail": (0.0, 0.0)}
        b = {"head": (2.0, 0.0), "tail": (0.0, 0.0)}
        assert float(loss_position(a, b, self.CFG)) == pytest.approx(0.1 * 4.0)

    def test_upper_bound(self):
        a = {"head": None, "tail": None}
        b = {"head": (0.0, 0.0), "tail": (0.0, 0.0)}
        assert float(loss_position(a, b, self.CFG)) == pytest.approx(2 * (1.0 + 0.1) * 16.0)

    def test_zero_gradient_beyond_margin(self):
        col = torch.tensor(9.0, requires_grad=True)  # gap 9 -> 81 > tau
        a = {"head": (0.0, col), "tail": None}
        b = {"head": (0.0, 0.0), "tail": None}
        loss_position(a, b, self.CFG).backward()
        assert col.grad is not None and float(col.grad) == 0.0

    def test_gradient_flows_within_margin(self):
        col = torch.tensor(3.0, requires_grad=True)  # gap 3 -> 9 < tau
        a = {"head": (0.0, col), "tail": None}
        b = {"head": (0.0, 0.0), "tail": None}
        loss_position(a, b, self.CFG).backward()
        assert float(col.grad) == pytest.approx(2.0 * 3.0)

    def test_invariant_to_centroid_preserving_map_changes(self):
        spike = torch.zeros(9, 9)
        spike[4, 4] = 5.0
        spread = torch.zeros(9, 9)
        spread[4, 2] = 1.0
        spread[4, 6] = 1.0
        spread[2, 4] = 1.0
        spread[6, 4] = 1.0
        other = {"head": (1.0, 1.0), "tail": (7.0, 7.0)}
        for m in (spike, spread):
            assert centroid(m) == (4.0, 4.0) or tuple(map(float, centroid(m))) == (4.0, 4.0)
        la = loss_position({"head": centroid(spike), "tail": centroid(spike)}, other, self.CFG)
        lb = loss_position({"head": centroid(spread), "tail": centroid(spread)}, other, self.CFG)
        assert float(la) == pytest.approx(float(lb))

    def test_gradients_match_finite_differences(self):
        ar = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
        ac = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)

        def fn():
            a = {"head": (ar, ac), "tail": (ar * 2, ac + 1)}
            b = {"head": (0.0, 0.5), "tail": (3.0, 2.0)}
            return loss_position(a, b, self.CFG)

        assert_grads_match(fn, [ar, ac])


class TestLabelPredictor:
    def _toy_data(self, n=8, size=32, seed=0):
        rng = np.random.default_rng(seed)
        images, anns = [], []
        for k in range(n):
            img = np.full((3, size, size), 0.2, dtype=np.float32)
            x = int(rng.integers(6, size - 6))
            y = int(rng.integers(6, size - 6))
            ii, jj = np.ogrid[0:size, 0:size]
            disk = (ii - y) ** 2 + (jj - x) ** 2 <= 9
            img[:, disk] = 1.0
            tail_x = size - 1 - x
            images.append(img)
            anns.append(LabelAnnotation(str(k), 3, [
                {"kind": "head", "x": x, "y": y},
                {"kind": "tail", "x": tail_x, "y": y}]))
        return torch.from_numpy(np.stack(images)), anns

    def test_training_localizes_heads(self):
        images, anns = self._toy_data(n=10)
        backbone = FrozenPyramidBackbone()
        cfg = SemiConfig(predictor_iterations=300)
        pred = train_label_predictor(images, anns, backbone, cfg, seed=0)
        maps = predict_label_map(pred, backbone, images)
        size = images.shape[-1]
        scale = size / maps.shape[-1]
        hits = 0
        for k, a in enumerate(anns):
            cents = map_centroids(maps[k])
            if cents["head"] is None:
                continue
            hx = float(cents["head"][1]) * scale
            hy = float(cents["head"][0]) * scale
            gx, gy = a.point("head")
            if math.hypot(hx - gx, hy - gy) <= 3 * a.radius:
                hits += 1
        assert hits / len(anns) >= 0.9

    def test_requires_annotations(self):
        with pytest.raises(ValueError):
            train_label_predictor(torch.zeros(0, 3, 32, 32), [], FrozenPyramidBackbone(),
                                  SemiConfig())

    def test_frozen_after_training(self):
        images, anns = self._toy_data(n=4)
        pred = train_label_predictor(images, anns, FrozenPyramidBackbone(),
                                     SemiConfig(predictor_iterations=5), seed=0)
        assert not any(p.requires_grad for p in pred.parameters())

    def test_output_resolution_matches_mid_feature(self):
        backbone = FrozenPyramidBackbone()
        pred = LabelPredictor(backbone.channels("p2") + backbone.channels("p3"))
        out = predict_label_map(pred, backbone, torch.rand(2, 3, 32, 32))
        assert out.shape == (2, 2, 8, 8)
        assert out.min() >= 0 and out.max() <= 1


class TestInjectSemanticPrior:
    def test_channel_concat(self):
        content = torch.rand(2, 1, 8, 8)
        feat = torch.rand(2, 32, 8, 8)
        out = inject_semantic_prior(content, feat)
        assert out.shape == (2, 33, 8, 8)
        assert torch.equal(out[:, :1], content)

    def test_resizes_backbone_feature(self):
        out = inject_semantic_prior(torch.rand(1, 1, 8, 8), torch.rand(1, 4, 4, 4))
        assert out.shape == (1, 5, 8, 8)

    def test_zero_feature_keeps_generator_running(self, tiny_cfg):
        from gpunit.networks import ContentEncoder, Generator
        backbone = FrozenPyramidBackbone()
        gen = Generator(tiny_cfg, prior_channels=backbone.channels("p2"))
        enc = ContentEncoder(tiny_cfg).eval()
        x = torch.rand(1, 3, 32, 32)
        feats = enc.features(x)
        content_in = inject_semantic_prior(feats[-1],
                                           torch.zeros(1, backbone.channels("p2"), 8, 8))
        img, _ = gen(content_in, torch.randn(1, tiny_cfg.style_dim), feats)
        assert img.shape == (1, 3, 32, 32)

    def test_gradient_reaches_first_layer_from_both_slices(self, tiny_cfg):
        from gpunit.networks import ContentEncoder, Generator
        gen = Generator(tiny_cfg, prior_channels=4)
        enc = ContentEncoder(tiny_cfg).eval()
        x = torch.rand(1, 3, 32, 32)
        feats = enc.features(x)
        content = feats[-1].detach().requires_grad_(True)
        prior = torch.rand(1, 4, 8, 8, requires_grad=True)
        img, _ = gen(inject_semantic_prior(content, prior),
                     torch.randn(1, tiny_cfg.style_dim), feats)
        img.sum().backward()
        assert content.grad.abs().sum() > 0
        assert prior.grad.abs().sum() > 0
        w_grad = gen.g0.weight.grad
        assert w_grad[:, :1].abs().sum() > 0 and w_grad[:, 1:].abs().sum() > 0


class TestAnnotationIO:
    def test_roundtrip(self, tmp_path):
        a = ann([{"kind": "head", "x": 2, "y": 3}], radius=4, image_id="42")
        path = tmp_path / "42.json"
        a.save(str(path))
        b = LabelAnnotation.load(str(path))
        assert b.to_dict() == a.to_dict()

    def test_scaled(self):
        a = ann([{"kind": "head", "x": 8, "y": 12}], radius=4)
        s = a.scaled(0.25)
        assert s.point("head") == (2, 3) and s.radius == 1
