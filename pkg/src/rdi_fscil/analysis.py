"""Diagnostics for base-novel confusion: the four-way accuracy decomposition,
patch-similarity statistics by central/redundant category, intra/inter-class
cosine-distance CDFs, and alignment of masks with planted synthetic regions."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .core import NORM_EPS, CosineClassifier, MaskKind, PatchMask
from .data import Box, DatasetAdapter
from .model import Backbone


def accuracy_decomposition(y_true: np.ndarray, y_pred_full: np.ndarray,
                           y_pred_novel: Optional[np.ndarray],
                           base_columns: set, session: int) -> tuple:
    """Split top-1 accuracy into (BA, NA, AA, NN).

    BA/NA/AA score base-class / novel-class / all samples against the full
    encountered label space; NN scores novel-class samples with the argmax
    restricted to novel columns. For session 0, NA and NN are None.
    """
    y_true = np.asarray(y_true)
    y_pred_full = np.asarray(y_pred_full)
    is_base = np.isin(y_true, list(base_columns))

    aa = float((y_pred_full == y_true).mean())
    ba = float((y_pred_full[is_base] == y_true[is_base]).mean()) if is_base.any() else 0.0
    if session == 0:
        return ba, None, aa, None

    if not (~is_base).any():
        raise ValueError(f"session {session} has no novel-class test samples")
    if y_pred_novel is None:
        raise ValueError("sessions >= 1 need novel-restricted predictions")
    y_pred_novel = np.asarray(y_pred_novel)
    na = float((y_pred_full[~is_base] == y_true[~is_base]).mean())
    nn = float((y_pred_novel[~is_base] == y_true[~is_base]).mean())
    return ba, na, aa, nn


@dataclass(frozen=True)
class PatchSimilarityStats:
    """Mean exponentiated similarities by patch category (central = at or above
    the threshold against the true class, redundant = below). A category with
    no patches reports None."""

    threshold: float
    central_to_own: Optional[float]
    redundant_to_own: Optional[float]
    central_to_other: Optional[float]
    redundant_to_other: Optional[float]
    central_count: int
    redundant_count: int

    def to_json_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "central_to_own": self.central_to_own,
            "redundant_to_own": self.redundant_to_own,
            "central_to_other": self.central_to_other,
            "redundant_to_other": self.redundant_to_other,
            "central_count": self.central_count,
            "redundant_count": self.redundant_count,
        }


def patch_similarity_stats(backbone: Backbone, classifier: CosineClassifier,
                           images: torch.Tensor, labels: torch.Tensor,
                           threshold: float, columns: Optional[dict] = None,
                           batch_size: int = 256) -> PatchSimilarityStats:
    """Categorize every feature-map patch by its cosine to the ground-truth
    class column, then report mean e^{tau*cos} to the own class and the mean
    summed e^{tau*cos} to all other classes, per category.

    `columns` maps raw labels to classifier column indices (identity when
    omitted)."""
    tau = classifier.temperature
    n = classifier.num_real_classes
    own_e, other_e, central = [], [], []
    with torch.no_grad():
        w = classifier.normalized_weight()[:, :n]
        for start in range(0, images.shape[0], batch_size):
            x = images[start:start + batch_size]
            y = labels[start:start + batch_size]
            if columns is not None:
                y = torch.tensor([columns[int(c)] for c in y], dtype=torch.long)
            fmaps = backbone(x)  # (B, h, w, d)
            patches = fmaps / (fmaps.norm(dim=3, keepdim=True) + NORM_EPS)
            cos = torch.einsum("bhwd,dn->bhwn", patches, w)  # (B, h, w, n)
            e = torch.exp(tau * cos)
            b = x.shape[0]
            own_idx = y.view(b, 1, 1, 1).expand(-1, cos.shape[1], cos.shape[2], 1)
            own_cos = cos.gather(3, own_idx).squeeze(3)
            own = e.gather(3, own_idx).squeeze(3)
            other = e.sum(dim=3) - own
            own_e.append(own.reshape(-1))
            other_e.append(other.reshape(-1))
            central.append((own_cos >= threshold).reshape(-1))
    own_e = torch.cat(own_e).numpy()
    other_e = torch.cat(other_e).numpy()
    central = torch.cat(central).numpy()

    def mean_or_none(values: np.ndarray) -> Optional[float]:
        return float(values.mean()) if values.size else None

    return PatchSimilarityStats(
        threshold=threshold,
        central_to_own=mean_or_none(own_e[central]),
        redundant_to_own=mean_or_none(own_e[~central]),
        central_to_other=mean_or_none(other_e[central]),
        redundant_to_other=mean_or_none(other_e[~central]),
        central_count=int(central.sum()),
        redundant_count=int((~central).sum()),
    )


@dataclass(frozen=True)
class DistanceCdfs:
    """Sorted cosine distances (1 - cos) with their means.

    intra: all within-class sample pairs; inter: pairs of class-mean
    embeddings. Singleton classes are skipped for intra (listed in
    `skipped_singletons`)."""

    intra_values: np.ndarray
    inter_values: np.ndarray
    intra_mean: float
    inter_mean: float
    skipped_singletons: tuple

    def cdf(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        values = self.intra_values if which == "intra" else self.inter_values
        return values, np.arange(1, len(values) + 1) / len(values)


def _cosine_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / (np.linalg.norm(a, axis=1, keepdims=True) + NORM_EPS)
    bn = b / (np.linalg.norm(b, axis=1, keepdims=True) + NORM_EPS)
    return 1.0 - an @ bn.T


def class_distance_cdfs(features_by_class: dict) -> DistanceCdfs:
    """Pairwise cosine-distance CDFs: intra within each class, inter between
    class means. Needs >= 2 classes; classes with one sample are excluded from
    intra with a warning entry."""
    if len(features_by_class) < 2:
        raise ValueError("need at least two classes")
    intra, means, skipped = [], {}, []
    for c, feats in features_by_class.items():
        f = np.asarray(feats, dtype=np.float64)
        means[c] = f.mean(axis=0)
        if f.shape[0] < 2:
            skipped.append(c)
            continue
        dist = _cosine_distance_matrix(f, f)
        iu = np.triu_indices(f.shape[0], k=1)
        intra.append(dist[iu])
    mean_mat = np.stack([means[c] for c in sorted(means)])
    inter_dist = _cosine_distance_matrix(mean_mat, mean_mat)
    iu = np.triu_indices(mean_mat.shape[0], k=1)
    inter = np.sort(inter_dist[iu])
    intra = np.sort(np.concatenate(intra)) if intra else np.array([])
    return DistanceCdfs(
        intra_values=intra,
        inter_values=inter,
        intra_mean=float(intra.mean()) if intra.size else float("nan"),
        inter_mean=float(inter.mean()),
        skipped_singletons=tuple(sorted(skipped)),
    )


def _window_overlap_fraction(a: int, b: int, stride: int, box: Optional[Box]) -> float:
    """Fraction of the patch's receptive window (cumulative-stride square at
    cell (a, b), padding halo ignored) covered by the box."""
    if box is None:
        return 0.0
    y0, x0, y1, x1 = a * stride, b * stride, (a + 1) * stride, (b + 1) * stride
    oy = max(0, min(y1, box[2]) - max(y0, box[0]))
    ox = max(0, min(x1, box[3]) - max(x0, box[1]))
    return (oy * ox) / float(stride * stride)


@dataclass(frozen=True)
class AlignmentScores:
    """How much mask mass lands inside the planted ground-truth boxes."""

    ali_in_nuisance: float  # mean over samples of ALI mass fraction in nuisance boxes
    alr_in_signal: float
    nuisance_base_rate: float  # nuisance area / image area
    signal_base_rate: float
    samples: int


def planted_redundancy_alignment(masks: Sequence[PatchMask], sample_ids: Sequence[str],
                                 adapter: DatasetAdapter, stride: int,
                                 image_size: int) -> AlignmentScores:
    """Score ALR masks (and their ALI complements) against the synthetic
    ground-truth regions. Errors out on datasets without region annotations."""
    ali_fracs, alr_fracs, nui_rates, sig_rates = [], [], [], []
    for mask, sid in zip(masks, sample_ids):
        regions = adapter.regions_of(sid)
        if regions is None:
            raise ValueError(f"sample {sid} has no planted-region ground truth")
        if mask.kind != MaskKind.ALR:
            raise ValueError("pass ALR masks; ALI is derived by complement")
        bits = mask.bits.detach().cpu().numpy()
        h, w = bits.shape
        sig = np.array([[_window_overlap_fraction(a, b, stride, regions.signal)
                         for b in range(w)] for a in range(h)])
        if bits.sum() > 0:
            alr_fracs.append(float((bits * sig).sum() / bits.sum()))
        area = float(image_size * image_size)
        sb = regions.signal
        sig_rates.append(((sb[2] - sb[0]) * (sb[3] - sb[1])) / area)
        # Nuisance alignment is only defined for samples that carry a
        # nuisance box; samples without one are excluded from the mean
        # rather than counted as zero.
        nb = regions.nuisance
        if nb is None:
            continue
        nui = np.array([[_window_overlap_fraction(a, b, stride, nb)
                         for b in range(w)] for a in range(h)])
        ali_bits = 1.0 - bits
        if ali_bits.sum() > 0:
            ali_fracs.append(float((ali_bits * nui).sum() / ali_bits.sum()))
        nui_rates.append(((nb[2] - nb[0]) * (nb[3] - nb[1])) / area)
    return AlignmentScores(
        ali_in_nuisance=float(np.mean(ali_fracs)) if ali_fracs else 0.0,
        alr_in_signal=float(np.mean(alr_fracs)) if alr_fracs else 0.0,
        nuisance_base_rate=float(np.mean(nui_rates)) if nui_rates else 0.0,
        signal_base_rate=float(np.mean(sig_rates)),
        samples=len(list(sample_ids)),
    )


def write_cdf_csv(path: Path, cdfs: DistanceCdfs, which: str) -> None:
    """Two-column CSV: distance, cumulative frequency."""
    values, cum = cdfs.cdf(which)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["distance", "cumulative_frequency"])
        for v, c in zip(values, cum):
            writer.writerow([repr(float(v)), repr(float(c))])


def write_analysis_json(path: Path, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def export_mask_overlay(path: Path, image: np.ndarray, mask: PatchMask, stride: int) -> None:
    """PNG with ALR patches tinted red over the grayscale image, plus a JSON
    sidecar holding the raw bits."""
    from PIL import Image

    if image.ndim == 2:
        rgb = np.stack([image] * 3, axis=2)
    else:
        rgb = image.copy()
    bits = mask.bits.detach().cpu().numpy()
    for a in range(bits.shape[0]):
        for b in range(bits.shape[1]):
            if bits[a, b]:
                ys, xs = a * stride, b * stride
                region = rgb[ys:ys + stride, xs:xs + stride]
                region[..., 0] = np.clip(region[..., 0] * 0.5 + 0.5, 0, 1)
                region[..., 1] *= 0.5
                region[..., 2] *= 0.5
    Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(path)
    with open(Path(path).with_suffix(".json"), "w") as f:
        json.dump({"kind": mask.kind.value, "bits": bits.astype(int).tolist()}, f)
