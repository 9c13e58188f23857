"""Training protocol: prototypes, evaluation decomposition plumbing,
frozen-backbone invariants, and determinism of base training."""

import numpy as np
import pytest
import torch

from rdi_fscil.core import CosineClassifier
from rdi_fscil.data import SyntheticSpec, build_schedule, generate_synthetic
from rdi_fscil.model import build_backbone
from rdi_fscil.protocol import (
    OptimizerConfig,
    backbone_hash,
    compute_prototypes,
    mean_prototypes,
    pooled_features,
    run_incremental,
    train_base,
)
from rdi_fscil.rdi import MaskSource, RdiConfig

from conftest import seeded_rng


def tiny_setup(seed=0, epochs=2, mask_source=MaskSource.ONLINE):
    spec = SyntheticSpec(image_size=16, class_count=6, samples_per_class=8,
                         signal_patch_size=8, nuisance_patch_size=4, seed=seed)
    adapter = generate_synthetic(spec)
    schedule = build_schedule(adapter, base_count=2, sessions=2, way=2, shot=1,
                              seed=seed)
    torch.manual_seed(seed)
    backbone = build_backbone("small-conv-4", in_channels=1)
    rdi_cfg = RdiConfig(threshold=0.05, mask_source=mask_source)
    opt_cfg = OptimizerConfig(lr=0.002, epochs_stage1=epochs, epochs_stage2=epochs,
                              batch_size=8)
    trained = train_base(adapter, schedule, backbone, rdi_cfg, opt_cfg, seed=seed)
    return adapter, schedule, trained


class TestMeanPrototypes:
    def test_matches_numpy_class_means(self):
        rng = seeded_rng(0)
        feats = torch.from_numpy(rng.standard_normal((12, 5)))
        labels = torch.tensor([0] * 4 + [1] * 5 + [3] * 3)
        store = mean_prototypes(feats, labels)
        assert store.class_ids() == [0, 1, 3]
        np.testing.assert_allclose(store.prototypes[1].vector.numpy(),
                                   feats[4:9].numpy().mean(axis=0), atol=1e-12)
        assert store.sample_counts == {0: 4, 1: 5, 3: 3}

    def test_matrix_order(self):
        rng = seeded_rng(1)
        feats = torch.from_numpy(rng.standard_normal((4, 3)))
        labels = torch.tensor([0, 0, 1, 1])
        store = mean_prototypes(feats, labels)
        m = store.matrix([1, 0])
        np.testing.assert_allclose(m[:, 0].numpy(), feats[2:].numpy().mean(axis=0))


class TestTrainBase:
    def test_classifier_carries_dummy(self):
        _, schedule, trained = tiny_setup()
        n_base = len(schedule.base_classes)
        assert trained.classifier.dummy_index == n_base
        assert trained.classifier.num_real_classes == n_base

    def test_history_records_both_stages(self):
        _, _, trained = tiny_setup(epochs=3)
        assert len(trained.history["stage1_loss"]) == 3
        assert len(trained.history["stage2_loss"]) == 3
        assert all(np.isfinite(v) for v in trained.history["stage1_loss"])

    def test_deterministic_under_seed(self):
        _, _, a = tiny_setup(seed=4)
        _, _, b = tiny_setup(seed=4)
        assert backbone_hash(a.backbone) == backbone_hash(b.backbone)
        assert torch.equal(a.classifier.weight, b.classifier.weight)

    def test_online_mode_has_no_snapshot(self):
        _, _, trained = tiny_setup()
        assert trained.mask_backbone is None
        assert trained.mask_classifier is None

    def test_frozen_mode_keeps_stage1_snapshot(self):
        _, _, trained = tiny_setup(mask_source=MaskSource.FROZEN_PRETRAIN)
        assert trained.mask_backbone is not None
        # stage 2 moved the live backbone away from the snapshot
        assert backbone_hash(trained.mask_backbone) != backbone_hash(trained.backbone)


class TestComputePrototypes:
    def test_global_pooling_matches_pooled_features(self):
        adapter, schedule, trained = tiny_setup()
        store = compute_prototypes(trained.backbone, adapter, schedule, 0)
        feats, labels, _ = pooled_features(trained.backbone, adapter,
                                           schedule.train_manifests[0])
        want = mean_prototypes(feats, labels)
        for c in store.class_ids():
            np.testing.assert_allclose(store.prototypes[c].vector.numpy(),
                                       want.prototypes[c].vector.numpy(), atol=1e-6)

    def test_alr_pooling_needs_classifier(self):
        adapter, schedule, trained = tiny_setup()
        with pytest.raises(ValueError):
            compute_prototypes(trained.backbone, adapter, schedule, 0,
                               prototype_pooling="alr")

    def test_unknown_pooling_rejected(self):
        adapter, schedule, trained = tiny_setup()
        with pytest.raises(ValueError):
            compute_prototypes(trained.backbone, adapter, schedule, 0,
                               prototype_pooling="median")


class TestRunIncremental:
    def test_backbone_frozen_across_sessions(self):
        adapter, schedule, trained = tiny_setup()
        inc = run_incremental(trained.backbone, trained.classifier, adapter, schedule)
        assert len(set(inc.backbone_hashes)) == 1

    def test_report_structure(self):
        adapter, schedule, trained = tiny_setup()
        inc = run_incremental(trained.backbone, trained.classifier, adapter, schedule)
        assert len(inc.reports) == schedule.num_sessions
        assert inc.reports[0].session == 0
        assert inc.reports[0].na_acc is None
        for t, r in enumerate(inc.reports[1:], start=1):
            assert r.session == t
            assert r.na_acc is not None and r.nn_acc is not None
            assert abs(r.confusion_gap - (r.nn_acc - r.na_acc)) <= 1e-12

    def test_classifier_grows_by_way_each_session(self):
        adapter, schedule, trained = tiny_setup()
        inc = run_incremental(trained.backbone, trained.classifier, adapter, schedule)
        widths = [s.shape[1] for s in inc.classifier_states]
        assert widths == [2, 4, 6]
        assert inc.class_order == list(schedule.classes_through(2))

    def test_base_columns_stay_fixed_after_replacement(self):
        adapter, schedule, trained = tiny_setup()
        inc = run_incremental(trained.backbone, trained.classifier, adapter, schedule)
        first = inc.classifier_states[0]
        last = inc.classifier_states[-1]
        assert torch.equal(last[:, : first.shape[1]], first)

    def test_nn_at_least_na(self):
        # Restricting the argmax to novel columns can only help novel samples.
        adapter, schedule, trained = tiny_setup(seed=2)
        inc = run_incremental(trained.backbone, trained.classifier, adapter, schedule)
        for r in inc.reports[1:]:
            assert r.nn_acc >= r.na_acc - 1e-12
