"""Redundancy decoupling and integration.

The feature map is split per patch by thresholded cosine similarity to the
predicted class column: patches at or above the threshold form the
label-relevant (ALR) mask, the complement forms the label-irrelevant (ALI)
mask. Masked pooling yields one feature per mask; the ALR feature keeps the
real label while the ALI feature is trained into an extra dummy column. The
total training loss is

    L = L_base + lambda * L_alr_dummy + beta * L_ali_dummy

with the plain globally-pooled cross-entropy as L_base. Masks are hard 0/1
selections treated as constants by autograd: gradients reach the feature map
only through the mask-weighted pooling products.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import torch
import torch.nn.functional as F

from .core import (
    NORM_EPS,
    CosineClassifier,
    FeatureMap,
    MaskKind,
    PatchMask,
    PooledFeature,
    PoolSource,
)
from .model import Backbone, global_pool, predict


class PoolingMode(Enum):
    MASKED_MEAN = "masked_mean"  # divide by the number of selected patches
    GLOBAL_MEAN = "global_mean"  # divide by h*w regardless of mask area


class MaskSource(Enum):
    ONLINE = "online"  # masks recomputed each step from the live model
    FROZEN_PRETRAIN = "frozen_pretrain"  # masks from the stage-1 snapshot


class EmptyMaskPolicy(Enum):
    FALLBACK_GLOBAL = "fallback_global"  # substitute the globally pooled feature
    SKIP_TERM = "skip_term"  # the sample contributes zero to this term


@dataclass(frozen=True)
class RdiConfig:
    """Hyperparameters of the decoupling/integration loss."""

    threshold: float = 0.0  # cosine threshold splitting ALR from ALI patches
    lam: float = 1.0  # weight of the ALR term
    beta: float = 1.0  # weight of the ALI (dummy) term
    pooling_mode: PoolingMode = PoolingMode.MASKED_MEAN
    mask_source: MaskSource = MaskSource.ONLINE
    # An all-redundant sample still needs a classification signal, hence the
    # global fallback for ALR; an empty ALI mask means nothing to integrate.
    alr_empty_policy: EmptyMaskPolicy = EmptyMaskPolicy.FALLBACK_GLOBAL
    ali_empty_policy: EmptyMaskPolicy = EmptyMaskPolicy.SKIP_TERM
    base_loss_includes_dummy: bool = False

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lam and beta must be >= 0")


def predicted_label(classifier: CosineClassifier, fmap: FeatureMap) -> int:
    """Class used to index the mask: argmax cosine of the globally pooled
    feature against the base columns (the dummy, if any, is excluded)."""
    return predict(classifier, global_pool(fmap))


def alr_mask(fmap: FeatureMap, classifier: CosineClassifier, y_p: int,
             threshold: float) -> PatchMask:
    """Select patches whose normalized cosine to column y_p is >= threshold.

    All-zero and all-one masks are legal; downstream empty-mask policies deal
    with them.
    """
    if not (0 <= y_p < classifier.num_real_classes):
        raise ValueError(f"predicted label {y_p} outside the {classifier.num_real_classes} real classes")
    with torch.no_grad():
        col = classifier.weight[:, y_p]
        col = col / (col.norm() + NORM_EPS)
        patches = fmap.values
        norms = patches.norm(dim=2, keepdim=True) + NORM_EPS
        scores = (patches / norms) @ col
        bits = (scores >= threshold).to(patches.dtype)
    return PatchMask(bits=bits, kind=MaskKind.ALR)


def ali_mask(alr: PatchMask) -> PatchMask:
    """Elementwise complement of the ALR mask."""
    if alr.kind != MaskKind.ALR:
        raise ValueError("ali_mask expects an ALR mask")
    return alr.complement()


def masked_pool(fmap: FeatureMap, mask: PatchMask,
                mode: PoolingMode = PoolingMode.MASKED_MEAN) -> PooledFeature:
    """Pool the mask-selected patches into one d-vector.

    MASKED_MEAN divides by the selected-patch count (pool magnitude is then
    independent of mask area); GLOBAL_MEAN divides by h*w. An all-zero mask
    yields the zero vector with support_count 0.
    """
    if mask.bits.shape != (fmap.h, fmap.w):
        raise ValueError("mask and feature map spatial shapes differ")
    bits = mask.bits.to(fmap.values.dtype)
    total = (fmap.values * bits.unsqueeze(-1)).sum(dim=(0, 1))
    support = mask.support
    if mode == PoolingMode.MASKED_MEAN:
        vec = total / max(1, support)
    else:
        vec = total / (fmap.h * fmap.w)
    source = PoolSource.ALR if mask.kind == MaskKind.ALR else PoolSource.ALI
    return PooledFeature(vector=vec, source_mask_kind=source, support_count=support)


def extend_with_dummy(classifier: CosineClassifier, seed: int = 0) -> CosineClassifier:
    """Append one trainable unit-norm dummy column; base columns are copied
    unchanged. Extending twice is an error."""
    if classifier.dummy_index is not None:
        raise ValueError("classifier already has a dummy column")
    gen = torch.Generator().manual_seed(seed)
    w = classifier.weight.detach()
    extra = torch.randn(classifier.d, 1, generator=gen, dtype=w.dtype)
    extra = extra / (extra.norm() + NORM_EPS)
    new_w = torch.cat([w.clone(), extra], dim=1)
    return CosineClassifier(new_w, temperature=classifier.temperature,
                            dummy_index=classifier.num_columns)


def _term_cross_entropy(classifier: CosineClassifier, feature: Union[PooledFeature, torch.Tensor],
                        target: int, policy: EmptyMaskPolicy,
                        global_feature: Optional[Union[PooledFeature, torch.Tensor]]) -> torch.Tensor:
    from .model import cross_entropy_cosine

    vec = feature.vector if isinstance(feature, PooledFeature) else feature
    empty = isinstance(feature, PooledFeature) and feature.support_count == 0
    if empty or float(vec.detach().norm()) == 0.0:
        if policy == EmptyMaskPolicy.SKIP_TERM:
            return torch.zeros((), dtype=vec.dtype, device=vec.device)
        if global_feature is None:
            raise ValueError("FALLBACK_GLOBAL needs the globally pooled feature")
        feature = global_feature
    return cross_entropy_cosine(classifier, feature, target)


def loss_alr_dummy(classifier_dummy: CosineClassifier, f_alr: PooledFeature, y: int,
                   policy: EmptyMaskPolicy = EmptyMaskPolicy.FALLBACK_GLOBAL,
                   global_feature: Optional[PooledFeature] = None) -> torch.Tensor:
    """Cross-entropy of the ALR feature against its real label, scored over
    all n+1 columns (dummy included in the denominator)."""
    if classifier_dummy.dummy_index is None:
        raise ValueError("classifier has no dummy column")
    if y == classifier_dummy.dummy_index:
        raise ValueError("the real label cannot be the dummy index")
    return _term_cross_entropy(classifier_dummy, f_alr, y, policy, global_feature)


def loss_ali_dummy(classifier_dummy: CosineClassifier, f_ali: PooledFeature,
                   policy: EmptyMaskPolicy = EmptyMaskPolicy.SKIP_TERM) -> torch.Tensor:
    """Cross-entropy of the ALI feature against the dummy column."""
    if classifier_dummy.dummy_index is None:
        raise ValueError("classifier has no dummy column")
    return _term_cross_entropy(classifier_dummy, f_ali, classifier_dummy.dummy_index,
                               policy, None)


def compute_batch_masks(fmaps: torch.Tensor, classifier: CosineClassifier,
                        threshold: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Vectorized ALR masks for a (B, h, w, d) batch.

    Returns (masks, predicted_labels); masks are (B, h, w) in {0, 1}. Runs
    under no_grad: masks are constants for autograd.
    """
    with torch.no_grad():
        n = classifier.num_real_classes
        w = classifier.normalized_weight()[:, :n]
        pooled = fmaps.mean(dim=(1, 2))
        pooled = pooled / (pooled.norm(dim=1, keepdim=True) + NORM_EPS)
        y_p = (pooled @ w).argmax(dim=1)
        cols = w[:, y_p]  # (d, B)
        patches = fmaps / (fmaps.norm(dim=3, keepdim=True) + NORM_EPS)
        scores = torch.einsum("bhwd,db->bhw", patches, cols)
        masks = (scores >= threshold).to(fmaps.dtype)
    return masks, y_p


def _pool_batch(fmaps: torch.Tensor, masks: torch.Tensor, mode: PoolingMode) -> tuple[torch.Tensor, torch.Tensor]:
    counts = masks.sum(dim=(1, 2))
    total = (fmaps * masks.unsqueeze(-1)).sum(dim=(1, 2))
    if mode == PoolingMode.MASKED_MEAN:
        denom = counts.clamp(min=1).unsqueeze(1)
    else:
        denom = float(fmaps.shape[1] * fmaps.shape[2])
    return total / denom, counts


def _batched_ce(classifier: CosineClassifier, feats: torch.Tensor, targets: torch.Tensor,
                columns: Optional[slice] = None) -> torch.Tensor:
    logits = classifier.batched_logits(feats, columns=columns)
    return F.cross_entropy(logits, targets, reduction="none")


def total_loss(images: torch.Tensor, labels: torch.Tensor, backbone: Backbone,
               classifier_dummy: CosineClassifier, cfg: RdiConfig,
               mask_backbone: Optional[Backbone] = None,
               mask_classifier: Optional[CosineClassifier] = None,
               fixed_masks: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Batch mean of L_base + lam * L_alr + beta * L_ali.

    `mask_backbone`/`mask_classifier` supply a frozen snapshot for mask
    computation (FROZEN_PRETRAIN); `fixed_masks` bypasses mask computation
    entirely, which keeps the loss a smooth function of the parameters for
    finite-difference checks.
    """
    loss, _ = total_loss_details(images, labels, backbone, classifier_dummy, cfg,
                                 mask_backbone=mask_backbone,
                                 mask_classifier=mask_classifier,
                                 fixed_masks=fixed_masks)
    return loss


def total_loss_details(images: torch.Tensor, labels: torch.Tensor, backbone: Backbone,
                       classifier_dummy: CosineClassifier, cfg: RdiConfig,
                       mask_backbone: Optional[Backbone] = None,
                       mask_classifier: Optional[CosineClassifier] = None,
                       fixed_masks: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, dict]:
    if classifier_dummy.dummy_index is None:
        raise ValueError("total_loss needs a classifier with a dummy column")
    n = classifier_dummy.dummy_index
    if bool((labels >= n).any()) or bool((labels < 0).any()):
        raise ValueError("labels must be base-class ids below the dummy index")

    batch = images.shape[0]
    fmaps = backbone(images)  # (B, h, w, d)
    global_feats = fmaps.mean(dim=(1, 2))

    base_cols = None if cfg.base_loss_includes_dummy else slice(0, n)
    l_base = _batched_ce(classifier_dummy, global_feats, labels, columns=base_cols)

    if fixed_masks is not None:
        masks = fixed_masks.to(fmaps.dtype)
    else:
        if cfg.mask_source == MaskSource.FROZEN_PRETRAIN:
            if mask_backbone is None or mask_classifier is None:
                raise ValueError("FROZEN_PRETRAIN needs the snapshot backbone and classifier")
            with torch.no_grad():
                mask_fmaps = mask_backbone(images)
            masks, _ = compute_batch_masks(mask_fmaps, mask_classifier, cfg.threshold)
        else:
            masks, _ = compute_batch_masks(fmaps.detach(), classifier_dummy, cfg.threshold)

    f_alr, alr_counts = _pool_batch(fmaps, masks, cfg.pooling_mode)
    f_ali, ali_counts = _pool_batch(fmaps, 1.0 - masks, cfg.pooling_mode)

    zero = torch.zeros_like(l_base)

    alr_empty = alr_counts == 0
    if cfg.alr_empty_policy == EmptyMaskPolicy.FALLBACK_GLOBAL:
        f_alr = torch.where(alr_empty.unsqueeze(1), global_feats, f_alr)
        l_alr = _batched_ce(classifier_dummy, f_alr, labels)
    else:
        safe = torch.where(alr_empty.unsqueeze(1), torch.ones_like(f_alr), f_alr)
        l_alr = torch.where(alr_empty, zero, _batched_ce(classifier_dummy, safe, labels))

    ali_empty = ali_counts == 0
    dummy_targets = torch.full_like(labels, n)
    if cfg.ali_empty_policy == EmptyMaskPolicy.FALLBACK_GLOBAL:
        f_ali = torch.where(ali_empty.unsqueeze(1), global_feats, f_ali)
        l_ali = _batched_ce(classifier_dummy, f_ali, dummy_targets)
    else:
        safe = torch.where(ali_empty.unsqueeze(1), torch.ones_like(f_ali), f_ali)
        l_ali = torch.where(ali_empty, zero, _batched_ce(classifier_dummy, safe, dummy_targets))

    per_sample = l_base + cfg.lam * l_alr + cfg.beta * l_ali
    loss = per_sample.sum() / batch
    details = {
        "l_base": l_base.detach().mean(),
        "l_alr": l_alr.detach().sum() / batch,
        "l_ali": l_ali.detach().sum() / batch,
        "masks": masks.detach(),
        "alr_counts": alr_counts.detach(),
    }
    return loss, details
