"""Backbones, cosine scoring kernels (with brute-force numpy oracles),
prediction semantics, and checkpoint round-trips."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rdi_fscil.core import CosineClassifier, DegenerateFeatureError, FeatureMap
from rdi_fscil.model import (
    batched_predict,
    build_backbone,
    cosine_logits,
    cross_entropy_cosine,
    forward_feature_map,
    global_pool,
    load_checkpoint,
    predict,
    save_checkpoint,
)

from conftest import random_classifier, seeded_rng

EPS = 1e-12


def oracle_cosine_logits(weight: np.ndarray, tau: float, feat: np.ndarray) -> np.ndarray:
    w = weight / (np.linalg.norm(weight, axis=0, keepdims=True) + EPS)
    f = feat / (np.linalg.norm(feat) + EPS)
    return tau * (w.T @ f)


def oracle_cross_entropy(logits: np.ndarray, label: int) -> float:
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[label])


class TestBackbones:
    @pytest.mark.parametrize("arch", ["small-conv-4", "tile-conv-4"])
    def test_geometry_at_32(self, arch):
        bb = build_backbone(arch, in_channels=1)
        assert bb.output_geometry(32) == (4, 4, 64)

    def test_unknown_arch_rejected(self):
        with pytest.raises(ValueError):
            build_backbone("no-such-net", in_channels=1)

    def test_forward_feature_map_shape(self):
        bb = build_backbone("small-conv-4", in_channels=1)
        fm = forward_feature_map(bb, torch.rand(1, 32, 32))
        assert (fm.h, fm.w, fm.d) == (4, 4, 64)

    def test_batched_forward_channel_last(self):
        bb = build_backbone("small-conv-4", in_channels=1)
        out = bb(torch.rand(3, 1, 32, 32))
        assert out.shape == (3, 4, 4, 64)

    def test_same_seed_same_weights(self):
        torch.manual_seed(11)
        a = build_backbone("small-conv-4", in_channels=1)
        torch.manual_seed(11)
        b = build_backbone("small-conv-4", in_channels=1)
        for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(pa, pb)


class TestCosineLogitsOracle:
    def test_matches_brute_force_200_cases(self):
        rng = seeded_rng(42)
        for _ in range(200):
            d = int(rng.integers(2, 9))
            m = int(rng.integers(2, 6))
            tau = float(rng.uniform(0.5, 32.0))
            clf = random_classifier(rng, d, m, temperature=tau)
            feat = rng.standard_normal(d) + 0.05 * np.sign(rng.standard_normal(d))
            got = cosine_logits(clf, torch.from_numpy(feat)).detach().numpy()
            want = oracle_cosine_logits(clf.weight.detach().numpy(), tau, feat)
            np.testing.assert_allclose(got, want, atol=1e-6, rtol=1e-6)

    def test_zero_feature_rejected(self):
        rng = seeded_rng(0)
        clf = random_classifier(rng, 4, 3)
        with pytest.raises(DegenerateFeatureError):
            cosine_logits(clf, torch.zeros(4, dtype=torch.float64))

    def test_temperature_scales_monotonically(self):
        # Raising tau scales every cosine by the same positive factor, so
        # orderings are preserved and magnitudes grow proportionally.
        rng = seeded_rng(5)
        w = torch.from_numpy(rng.standard_normal((6, 4)) + 0.1)
        feat = torch.from_numpy(rng.standard_normal(6))
        lo = cosine_logits(CosineClassifier(w, temperature=4.0), feat)
        hi = cosine_logits(CosineClassifier(w, temperature=16.0), feat)
        assert torch.allclose(hi, 4.0 * lo, atol=1e-9)
        assert torch.equal(lo.argsort(), hi.argsort())


class TestCrossEntropyOracle:
    def test_matches_brute_force_200_cases(self):
        rng = seeded_rng(7)
        for _ in range(200):
            d = int(rng.integers(2, 9))
            m = int(rng.integers(2, 6))
            tau = float(rng.uniform(0.5, 32.0))
            clf = random_classifier(rng, d, m, temperature=tau)
            feat = rng.standard_normal(d) + 0.05 * np.sign(rng.standard_normal(d))
            label = int(rng.integers(0, m))
            got = float(cross_entropy_cosine(clf, torch.from_numpy(feat), label).detach())
            want = oracle_cross_entropy(
                oracle_cosine_logits(clf.weight.detach().numpy(), tau, feat), label)
            assert abs(got - want) <= 1e-6 * max(1.0, abs(want))

    def test_column_restriction(self):
        rng = seeded_rng(8)
        clf = random_classifier(rng, 5, 4)
        feat = torch.from_numpy(rng.standard_normal(5))
        got = float(cross_entropy_cosine(clf, feat, 1, columns=slice(0, 3)).detach())
        logits = oracle_cosine_logits(clf.weight.detach().numpy(),
                                      clf.temperature,
                                      feat.numpy())[:3]
        assert abs(got - oracle_cross_entropy(logits, 1)) <= 1e-6

    def test_label_out_of_range(self):
        rng = seeded_rng(9)
        clf = random_classifier(rng, 5, 3)
        with pytest.raises(ValueError):
            cross_entropy_cosine(clf, torch.ones(5, dtype=torch.float64), 3)


class TestPredict:
    def test_dummy_never_predicted(self):
        # Feature aligned exactly with the dummy column must still land on a
        # real class.
        w = torch.eye(4)
        clf = CosineClassifier(w, dummy_index=3)
        assert predict(clf, torch.tensor([0.0, 0.0, 0.0, 1.0])) != 3

    def test_ties_break_to_smallest(self):
        w = torch.stack([torch.tensor([1.0, 0.0]), torch.tensor([1.0, 0.0]),
                         torch.tensor([0.0, 1.0])], dim=1)
        clf = CosineClassifier(w)
        assert predict(clf, torch.tensor([1.0, 0.0])) == 0

    @given(st.floats(0.25, 8.0))
    @settings(max_examples=30)
    def test_rescaling_invariance(self, scale):
        rng = seeded_rng(12)
        clf = random_classifier(rng, 6, 5)
        feat = torch.from_numpy(rng.standard_normal(6) + 0.05)
        assert predict(clf, feat) == predict(clf, scale * feat)

    def test_batched_matches_single(self):
        rng = seeded_rng(13)
        clf = random_classifier(rng, 6, 5, dummy=True)
        feats = torch.from_numpy(rng.standard_normal((10, 6)) + 0.01)
        batched = batched_predict(clf, feats)
        singles = [predict(clf, feats[i]) for i in range(10)]
        assert batched.tolist() == singles

    def test_batched_allowed_restriction(self):
        rng = seeded_rng(14)
        clf = random_classifier(rng, 6, 5)
        feats = torch.from_numpy(rng.standard_normal((8, 6)) + 0.01)
        allowed = torch.tensor([2, 4])
        preds = batched_predict(clf, feats, allowed=allowed)
        assert set(preds.tolist()) <= {2, 4}


class TestGlobalPool:
    def test_matches_mean(self):
        rng = seeded_rng(15)
        fm = FeatureMap(torch.from_numpy(rng.standard_normal((3, 3, 4))))
        pooled = global_pool(fm)
        np.testing.assert_allclose(pooled.vector.numpy(),
                                   fm.values.numpy().mean(axis=(0, 1)), atol=1e-12)
        assert pooled.support_count == 9


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(3)
        bb = build_backbone("small-conv-4", in_channels=1)
        clf = CosineClassifier.random_init(64, 5, seed=1)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, bb, clf)
        bb2, clf2, meta = load_checkpoint(path)
        for a, b in zip(bb.state_dict().values(), bb2.state_dict().values()):
            assert torch.equal(a, b)
        assert torch.equal(clf.weight, clf2.weight)
        assert clf2.temperature == clf.temperature
        assert clf2.dummy_index == clf.dummy_index

    def test_dummy_survives_round_trip(self, tmp_path):
        torch.manual_seed(4)
        bb = build_backbone("small-conv-4", in_channels=1)
        w = torch.randn(64, 6) + 0.1
        clf = CosineClassifier(w, dummy_index=5)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, bb, clf)
        _, clf2, _ = load_checkpoint(path)
        assert clf2.dummy_index == 5
