"""The session engine: two-stage base training, prototype replacement, and
frozen-backbone incremental sessions with per-session evaluation."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .core import (
    CosineClassifier,
    DivergenceError,
    EvalReport,
    PooledFeature,
    PoolSource,
    PrototypeStore,
    SessionSchedule,
)
from .data import DatasetAdapter
from .model import Backbone, batched_predict
from .rdi import MaskSource, RdiConfig, compute_batch_masks, extend_with_dummy, total_loss_details


@dataclass(frozen=True)
class OptimizerConfig:
    """SGD-with-momentum settings for the two base-training stages."""

    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs_stage1: int = 20  # cross-entropy pretraining over the base columns
    epochs_stage2: int = 25  # full three-term loss with the dummy column
    cosine_decay: bool = True


@dataclass
class TrainResult:
    backbone: Backbone
    classifier: CosineClassifier  # carries the dummy column
    history: dict = field(default_factory=dict)
    # Stage-1 snapshot used for mask computation under FROZEN_PRETRAIN
    # (None when masks are recomputed online). Diagnostics that report mask
    # placement must score the same masks the run trained with.
    mask_backbone: Optional[Backbone] = None
    mask_classifier: Optional[CosineClassifier] = None


def _stack_split(adapter: DatasetAdapter, manifest: dict) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Load a manifest (class id -> sample ids) into (X, y) tensors."""
    images, labels, ids = [], [], []
    for c in sorted(manifest):
        for sid in manifest[c]:
            arr = adapter.load_image(sid)
            t = torch.from_numpy(np.ascontiguousarray(arr))
            if t.dim() == 2:
                t = t.unsqueeze(0)
            else:
                t = t.permute(2, 0, 1)
            images.append(t)
            labels.append(c)
            ids.append(sid)
    return torch.stack(images), torch.tensor(labels, dtype=torch.long), ids


def _epoch_lr(cfg: OptimizerConfig, epoch: int, total_epochs: int) -> float:
    if not cfg.cosine_decay or total_epochs <= 1:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, history: dict) -> None:
    if not bool(torch.isfinite(loss.detach())):
        raise DivergenceError(
            f"non-finite loss in {stage} at epoch {epoch}",
            dump={"stage": stage, "epoch": epoch, "history": history},
        )


def train_base(adapter: DatasetAdapter, schedule: SessionSchedule, backbone: Backbone,
               rdi_cfg: RdiConfig, opt_cfg: OptimizerConfig, tau: float = 16.0,
               seed: int = 0, class_to_column: Optional[dict] = None) -> TrainResult:
    """Stage 1 trains backbone + base columns with plain cosine cross-entropy;
    the classifier is then extended with a dummy column and stage 2 minimizes
    the full decoupling/integration loss. The optimizer is re-initialized for
    stage 2."""
    images, raw_labels, _ = _stack_split(adapter, schedule.train_manifests[0])
    base_classes = list(schedule.base_classes)
    if class_to_column is None:
        class_to_column = {c: i for i, c in enumerate(base_classes)}
    labels = torch.tensor([class_to_column[int(c)] for c in raw_labels], dtype=torch.long)
    n_base = len(base_classes)

    classifier = CosineClassifier.random_init(
        backbone.feature_dim, n_base, temperature=tau, seed=seed * 9973 + 1
    )
    gen = torch.Generator().manual_seed(seed * 9973 + 2)
    history: dict = {"stage1_loss": [], "stage2_loss": []}

    def run_epochs(stage: str, epochs: int, clf: CosineClassifier, step_fn) -> None:
        params = list(backbone.parameters()) + list(clf.parameters())
        opt = torch.optim.SGD(params, lr=opt_cfg.lr, momentum=opt_cfg.momentum,
                              weight_decay=opt_cfg.weight_decay)
        for epoch in range(epochs):
            lr = _epoch_lr(opt_cfg, epoch, epochs)
            for g in opt.param_groups:
                g["lr"] = lr
            order = torch.randperm(images.shape[0], generator=gen)
            losses = []
            for start in range(0, images.shape[0], opt_cfg.batch_size):
                idx = order[start:start + opt_cfg.batch_size]
                loss = step_fn(images[idx], labels[idx], clf)
                _check_finite(loss, stage, epoch, history)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
            history[f"{stage}_loss"].append(float(np.mean(losses)))

    def stage1_step(x, y, clf):
        feats = backbone(x).mean(dim=(1, 2))
        logits = clf.batched_logits(feats)
        return torch.nn.functional.cross_entropy(logits, y)

    backbone.train()
    run_epochs("stage1", opt_cfg.epochs_stage1, classifier, stage1_step)

    classifier = extend_with_dummy(classifier, seed=seed * 9973 + 3)

    snapshot = None
    if rdi_cfg.mask_source == MaskSource.FROZEN_PRETRAIN:
        snapshot = (copy.deepcopy(backbone), copy.deepcopy(classifier))
        snapshot[0].eval()

    def stage2_step(x, y, clf):
        mask_bb, mask_clf = snapshot if snapshot is not None else (None, None)
        loss, _ = total_loss_details(x, y, backbone, clf, rdi_cfg,
                                     mask_backbone=mask_bb, mask_classifier=mask_clf)
        return loss

    run_epochs("stage2", opt_cfg.epochs_stage2, classifier, stage2_step)
    backbone.eval()

    mask_bb, mask_clf = snapshot if snapshot is not None else (None, None)
    return TrainResult(backbone=backbone, classifier=classifier, history=history,
                       mask_backbone=mask_bb, mask_classifier=mask_clf)


def pooled_features(backbone: Backbone, adapter: DatasetAdapter, manifest: dict,
                    batch_size: int = 256) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Globally pooled embeddings for every sample in a manifest."""
    images, labels, ids = _stack_split(adapter, manifest)
    feats = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            fmaps = backbone(images[start:start + batch_size])
            feats.append(fmaps.mean(dim=(1, 2)))
    return torch.cat(feats), labels, ids


def mean_prototypes(features: torch.Tensor, labels: torch.Tensor) -> PrototypeStore:
    """Per-class arithmetic means of (B, d) embeddings."""
    prototypes, counts = {}, {}
    for c in sorted(set(int(v) for v in labels)):
        sel = features[labels == c]
        prototypes[c] = PooledFeature(vector=sel.mean(dim=0), source_mask_kind=PoolSource.NONE,
                                      support_count=0)
        counts[c] = int(sel.shape[0])
    return PrototypeStore(prototypes=prototypes, sample_counts=counts)


def compute_prototypes(backbone: Backbone, adapter: DatasetAdapter,
                       schedule: SessionSchedule, session: int,
                       classifier: Optional[CosineClassifier] = None,
                       rdi_cfg: Optional[RdiConfig] = None,
                       prototype_pooling: str = "global") -> PrototypeStore:
    """Class-mean embeddings over the session's training manifest.

    The backbone must be frozen (eval mode); a class with zero samples is an
    error. prototype_pooling="alr" pools only mask-selected patches, which
    needs `classifier` and `rdi_cfg`."""
    manifest = schedule.train_manifests[session]
    for c, ids in manifest.items():
        if not ids:
            raise ValueError(f"class {c} has no samples in session {session}")
    if prototype_pooling == "global":
        feats, labels, _ = pooled_features(backbone, adapter, manifest)
        return mean_prototypes(feats, labels)
    if prototype_pooling != "alr":
        raise ValueError(f"unknown prototype_pooling {prototype_pooling!r}")
    if classifier is None or rdi_cfg is None:
        raise ValueError("alr prototype pooling needs classifier and rdi_cfg")
    images, labels, _ = _stack_split(adapter, manifest)
    feats = []
    with torch.no_grad():
        for start in range(0, images.shape[0], 256):
            fmaps = backbone(images[start:start + 256])
            masks, _ = compute_batch_masks(fmaps, classifier, rdi_cfg.threshold)
            counts = masks.sum(dim=(1, 2)).clamp(min=1).unsqueeze(1)
            pooled = (fmaps * masks.unsqueeze(-1)).sum(dim=(1, 2)) / counts
            empty = (masks.sum(dim=(1, 2)) == 0).unsqueeze(1)
            pooled = torch.where(empty, fmaps.mean(dim=(1, 2)), pooled)
            feats.append(pooled)
    return mean_prototypes(torch.cat(feats), labels)


def backbone_hash(backbone: Backbone) -> str:
    """SHA-256 over the parameter bytes, for frozen-backbone assertions."""
    h = hashlib.sha256()
    for name, p in sorted(backbone.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def evaluate_session(backbone: Backbone, classifier: CosineClassifier,
                     adapter: DatasetAdapter, schedule: SessionSchedule, session: int,
                     class_order: list[int]) -> EvalReport:
    """Accuracy decomposition over the cumulative test set of one session."""
    from .analysis import accuracy_decomposition

    feats, labels, _ = pooled_features(backbone, adapter, schedule.test_manifests[session])
    col_of = {c: i for i, c in enumerate(class_order)}
    y_true = torch.tensor([col_of[int(c)] for c in labels], dtype=torch.long)

    with torch.no_grad():
        y_full = batched_predict(classifier, feats)
        base_cols = len(schedule.base_classes)
        novel_cols = torch.arange(base_cols, classifier.num_real_classes)
        y_novel = batched_predict(classifier, feats, allowed=novel_cols) if len(novel_cols) else None

    base_set = set(range(base_cols))
    ba, na, aa, nn = accuracy_decomposition(
        y_true.numpy(), y_full.numpy(),
        y_novel.numpy() if y_novel is not None else None,
        base_set, session,
    )
    top1 = float((y_full == y_true).float().mean())
    if session == 0:
        return EvalReport(session=0, session_top1=top1, ba_acc=ba, aa_acc=aa)
    return EvalReport(session=session, session_top1=top1, ba_acc=ba, aa_acc=aa,
                      na_acc=na, nn_acc=nn, confusion_gap=nn - na)


@dataclass
class IncrementalResult:
    reports: list
    classifier_states: list  # per-session (d, m_t) weight tensors
    class_order: list  # column index -> class id
    backbone_hashes: list


def run_incremental(backbone: Backbone, classifier_dummy: CosineClassifier,
                    adapter: DatasetAdapter, schedule: SessionSchedule,
                    prototype_pooling: str = "global",
                    rdi_cfg: Optional[RdiConfig] = None) -> IncrementalResult:
    """Evaluate session 0 with the trained classifier (dummy excluded), replace
    base columns with prototypes, then run the frozen-backbone K-shot sessions,
    appending novel prototype columns and evaluating after each."""
    backbone.eval()
    tau = classifier_dummy.temperature
    class_order = list(schedule.base_classes)
    hashes = [backbone_hash(backbone)]

    reports = [evaluate_session(backbone, classifier_dummy, adapter, schedule, 0, class_order)]

    proto_cfg = rdi_cfg if prototype_pooling == "alr" else None
    store = compute_prototypes(backbone, adapter, schedule, 0,
                               classifier=classifier_dummy, rdi_cfg=proto_cfg,
                               prototype_pooling=prototype_pooling)
    weight = store.matrix(class_order)
    classifier = CosineClassifier(weight, temperature=tau)
    states = [classifier.weight.detach().clone()]

    for t in range(1, schedule.num_sessions):
        novel_store = compute_prototypes(backbone, adapter, schedule, t)
        novel_ids = sorted(novel_store.prototypes)
        class_order.extend(novel_ids)
        weight = torch.cat([classifier.weight.detach(), novel_store.matrix(novel_ids)], dim=1)
        classifier = CosineClassifier(weight, temperature=tau)
        states.append(classifier.weight.detach().clone())
        reports.append(evaluate_session(backbone, classifier, adapter, schedule, t, class_order))
        hashes.append(backbone_hash(backbone))

    return IncrementalResult(reports=reports, classifier_states=states,
                             class_order=class_order, backbone_hashes=hashes)
