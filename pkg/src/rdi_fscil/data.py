"""Dataset adapters and schedule construction.

Two sources are supported: a synthetic generator that plants a class-specific
signal patch and a cross-class nuisance patch into noise images (with
ground-truth region annotations), and a directory-per-class image layout for
real data. Both feed the same schedule builder.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .core import SCHEMA_VERSION, ScheduleError, SessionBlock, SessionSchedule

# Boxes are (y0, x0, y1, x1), inclusive-exclusive pixel coordinates.
Box = tuple[int, int, int, int]


class NuisanceSharing(Enum):
    # one nuisance texture shared by every even-id class (all its samples)
    SHARED_ACROSS_CLASSES = "shared_across_classes"
    # one nuisance texture on a random ~half subset of every class's samples,
    # so it carries no label information at all
    PER_CLASS_SUBSET = "per_class_subset"


@dataclass(frozen=True)
class SyntheticSpec:
    """Configuration of the planted-redundancy synthetic dataset."""

    image_size: int = 32
    class_count: int = 12
    samples_per_class: int = 60
    signal_patch_size: int = 16
    nuisance_patch_size: int = 8
    nuisance_sharing: NuisanceSharing = NuisanceSharing.SHARED_ACROSS_CLASSES
    noise_sigma: float = 0.05
    seed: int = 0
    test_fraction: float = 0.25
    signal_amplitude: float = 0.5
    nuisance_amplitude: float = 0.5
    # Smooth per-sample random background field; without it every image
    # shares one constant background and pooled features collapse onto a
    # near-degenerate cone that cosine training cannot escape at desk scale.
    background_amplitude: float = 0.4
    # Each sample renders its class texture in one of this many 90-degree
    # orientations. Base training sees every orientation, so base features
    # become rotation-robust; few-shot novel prototypes do not, which is the
    # transfer asymmetry the incremental protocol stresses. 1 disables it.
    signal_orientations: int = 1

    def validate(self) -> None:
        if self.class_count < 1 or self.samples_per_class < 1:
            raise ValueError("class_count and samples_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.signal_patch_size > self.image_size or self.nuisance_patch_size > self.image_size:
            raise ValueError("patch sizes must fit within the image")
        # Both patches must be placeable without overlap somewhere.
        if self.signal_patch_size + self.nuisance_patch_size > 2 * self.image_size - max(
            self.signal_patch_size, self.nuisance_patch_size
        ):
            raise ValueError("signal and nuisance patches cannot be placed without overlap")
        if self.signal_orientations not in (1, 2, 4):
            raise ValueError("signal_orientations must be 1, 2 or 4")
        if not (0.0 < self.test_fraction < 1.0):
            raise ValueError("test_fraction must be in (0, 1)")
        if int(round(self.samples_per_class * self.test_fraction)) < 1:
            raise ValueError("test_fraction leaves no test samples")


@dataclass(frozen=True)
class Regions:
    """Ground-truth planted boxes for one synthetic sample."""

    signal: Box
    nuisance: Optional[Box]


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    class_id: int
    split: str  # "train" or "test"


class DatasetAdapter:
    """Read access to a labeled, train/test-partitioned image collection."""

    def __init__(self, name: str, class_ids: list[int], samples: list[SampleRecord],
                 root: Optional[Path] = None):
        self.name = name
        self.root = root
        self.class_ids = sorted(class_ids)
        self._samples = {s.sample_id: s for s in samples}
        self._by_class_split: dict[tuple[int, str], list[str]] = {}
        for s in samples:
            if s.class_id not in self.class_ids:
                raise ValueError(f"sample {s.sample_id} labeled {s.class_id}, not in class list")
            self._by_class_split.setdefault((s.class_id, s.split), []).append(s.sample_id)

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def sample_ids(self, class_id: int, split: str) -> list[str]:
        return list(self._by_class_split.get((class_id, split), []))

    def label_of(self, sample_id: str) -> int:
        return self._samples[sample_id].class_id

    def load_image(self, sample_id: str) -> np.ndarray:
        """Return the image as float32 (H, W) or (H, W, C) in [0, 1]."""
        raise NotImplementedError

    def regions_of(self, sample_id: str) -> Optional[Regions]:
        """Planted-region ground truth, or None for non-synthetic data."""
        return None


class ManifestAdapter(DatasetAdapter):
    """Samples as ids only, no pixels; used for schedule-only protocol checks."""

    def __init__(self, name: str, class_count: int, train_per_class: int, test_per_class: int):
        samples = []
        for c in range(class_count):
            for i in range(train_per_class):
                samples.append(SampleRecord(f"{c:03d}_train_{i:03d}", c, "train"))
            for i in range(test_per_class):
                samples.append(SampleRecord(f"{c:03d}_test_{i:03d}", c, "test"))
        super().__init__(name, list(range(class_count)), samples)

    def load_image(self, sample_id: str) -> np.ndarray:
        raise RuntimeError("manifest-only adapter has no images")


class SyntheticDataset(DatasetAdapter):
    """In-memory synthetic dataset with planted signal and nuisance patches."""

    def __init__(self, spec: SyntheticSpec, images: dict, regions: dict,
                 samples: list[SampleRecord]):
        super().__init__("synthetic", list(range(spec.class_count)), samples)
        self.spec = spec
        self._images = images
        self._regions = regions

    def load_image(self, sample_id: str) -> np.ndarray:
        return self._images[sample_id]

    def regions_of(self, sample_id: str) -> Regions:
        return self._regions[sample_id]


def _texture(rng: np.random.Generator, size: int, amplitude: float,
             low: Optional[int] = None) -> np.ndarray:
    """A fixed low-frequency pattern in [0.5 - a, 0.5 + a], clipped to [0, 1]."""
    if low is None:
        low = min(4, size)
    coarse = rng.random((low, low))
    scale = int(np.ceil(size / low))
    fine = np.kron(coarse, np.ones((scale, scale)))[:size, :size]
    return np.clip(0.5 + amplitude * (2.0 * fine - 1.0), 0.0, 1.0).astype(np.float32)


def _placement_grid(image_size: int, patch_size: int) -> list[int]:
    """Anchor offsets for a patch: multiples of gcd(patch, leftover space),
    so patches of different sizes land on one common lattice."""
    leftover = image_size - patch_size
    if leftover == 0:
        return [0]
    step = math.gcd(patch_size, leftover)
    return list(range(0, leftover + 1, step))


def _boxes_overlap(a: Box, b: Box) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def nuisance_carriers(spec: SyntheticSpec) -> list[int]:
    """Class ids that carry a nuisance patch (every even id, i.e. half)."""
    return [c for c in range(spec.class_count) if c % 2 == 0]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Build the planted-redundancy dataset.

    Each image is a noisy background plus a class-determined signal patch and,
    for carrier classes, a nuisance patch whose texture is shared across
    classes: discriminative against non-carrier classes yet irrelevant to the
    true label. Patch placement is drawn per sample from a patch-size-aligned
    grid (so planted boxes line up with backbone patch cells when sizes match
    the cumulative stride); boxes never overlap. Fully deterministic in seed.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    signal_textures = [_texture(rng, spec.signal_patch_size, spec.signal_amplitude)
                       for _ in range(spec.class_count)]
    shared = _texture(rng, spec.nuisance_patch_size, spec.nuisance_amplitude)
    if spec.nuisance_sharing == NuisanceSharing.SHARED_ACROSS_CLASSES:
        carriers = set(nuisance_carriers(spec))
        nuisance_texture = {c: shared for c in carriers}
    else:
        # label-free mode: every class carries the texture on ~half its samples
        carriers = set(range(spec.class_count))
        nuisance_texture = {c: shared for c in carriers}

    sig_grid = _placement_grid(spec.image_size, spec.signal_patch_size)
    nui_grid = _placement_grid(spec.image_size, spec.nuisance_patch_size)

    n_test = int(round(spec.samples_per_class * spec.test_fraction))
    n_train = spec.samples_per_class - n_test

    images: dict[str, np.ndarray] = {}
    regions: dict[str, Regions] = {}
    samples: list[SampleRecord] = []

    per_sample_mode = spec.nuisance_sharing == NuisanceSharing.PER_CLASS_SUBSET
    for c in range(spec.class_count):
        for i in range(spec.samples_per_class):
            if per_sample_mode:
                sample_has_nuisance = bool(rng.random() < 0.5)
            else:
                sample_has_nuisance = c in carriers
            # Rejection-sample both boxes jointly: for large signal patches
            # some signal offsets leave no disjoint nuisance slot, so the
            # signal position must be re-drawn too.
            for _ in range(10_000):
                sy = int(rng.choice(sig_grid))
                sx = int(rng.choice(sig_grid))
                sig_box: Box = (sy, sx, sy + spec.signal_patch_size, sx + spec.signal_patch_size)
                nui_box: Optional[Box] = None
                if not sample_has_nuisance:
                    break
                ny = int(rng.choice(nui_grid))
                nx = int(rng.choice(nui_grid))
                nui_box = (ny, nx, ny + spec.nuisance_patch_size, nx + spec.nuisance_patch_size)
                if not _boxes_overlap(sig_box, nui_box):
                    break
            else:
                raise ValueError(
                    "could not place disjoint signal and nuisance patches; "
                    "patch sizes leave no room in the image")

            if spec.background_amplitude > 0:
                field = _texture(rng, spec.image_size, spec.background_amplitude, low=4)
            else:
                field = np.full((spec.image_size, spec.image_size), 0.5, dtype=np.float32)
            base = field
            patch = signal_textures[c]
            if spec.signal_orientations > 1:
                k = int(rng.integers(spec.signal_orientations))
                patch = np.ascontiguousarray(np.rot90(patch, k))
            base[sig_box[0]:sig_box[2], sig_box[1]:sig_box[3]] = patch
            if nui_box is not None:
                base[nui_box[0]:nui_box[2], nui_box[1]:nui_box[3]] = nuisance_texture[c]
            if spec.noise_sigma > 0:
                base = base + spec.noise_sigma * rng.standard_normal(base.shape).astype(np.float32)
            img = np.clip(base, 0.0, 1.0).astype(np.float32)

            split = "train" if i < n_train else "test"
            sid = f"{c:03d}_{i:03d}"
            images[sid] = img
            regions[sid] = Regions(signal=sig_box, nuisance=nui_box)
            samples.append(SampleRecord(sid, c, split))

    return SyntheticDataset(spec, images, regions, samples)


def save_dataset(adapter: DatasetAdapter, root: Path) -> None:
    """Write `<root>/<class_id>/<sample>.png` plus index.json; synthetic data
    additionally emits regions.json with the planted bounding boxes."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = {"schema_version": SCHEMA_VERSION, "name": adapter.name,
             "classes": adapter.class_ids, "samples": []}
    regions_out = {}
    for c in adapter.class_ids:
        cdir = root / f"{c:03d}"
        cdir.mkdir(exist_ok=True)
        for split in ("train", "test"):
            for sid in adapter.sample_ids(c, split):
                arr = adapter.load_image(sid)
                img = Image.fromarray(np.round(arr * 255.0).astype(np.uint8))
                rel = f"{c:03d}/{sid}.png"
                img.save(root / rel)
                index["samples"].append({"id": sid, "class": c, "split": split, "path": rel})
                reg = adapter.regions_of(sid)
                if reg is not None:
                    regions_out[sid] = {
                        "signal": list(reg.signal),
                        "nuisance": list(reg.nuisance) if reg.nuisance else None,
                    }
    with open(root / "index.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    if regions_out:
        with open(root / "regions.json", "w") as f:
            json.dump(regions_out, f, indent=2, sort_keys=True)


class DirectoryDataset(DatasetAdapter):
    """Directory-per-class image layout with index.json (and optional regions.json)."""

    def __init__(self, root: Path):
        root = Path(root)
        with open(root / "index.json") as f:
            index = json.load(f)
        if index.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported index schema_version {index.get('schema_version')!r}")
        samples = [SampleRecord(s["id"], s["class"], s["split"]) for s in index["samples"]]
        super().__init__(index.get("name", root.name), index["classes"], samples, root=root)
        self._paths = {s["id"]: s["path"] for s in index["samples"]}
        self._regions = None
        regions_path = root / "regions.json"
        if regions_path.exists():
            with open(regions_path) as f:
                raw = json.load(f)
            self._regions = {
                sid: Regions(signal=tuple(r["signal"]),
                             nuisance=tuple(r["nuisance"]) if r["nuisance"] else None)
                for sid, r in raw.items()
            }

    def load_image(self, sample_id: str) -> np.ndarray:
        img = Image.open(self.root / self._paths[sample_id])
        arr = np.asarray(img, dtype=np.float32) / 255.0
        return arr

    def regions_of(self, sample_id: str) -> Optional[Regions]:
        if self._regions is None:
            return None
        return self._regions[sample_id]


def load_dataset(root: Path) -> DirectoryDataset:
    return DirectoryDataset(Path(root))


def build_schedule(adapter: DatasetAdapter, base_count: int, sessions: int,
                   way: int, shot: int, seed: int = 0) -> SessionSchedule:
    """Carve an adapter's class list into a base session plus N-way K-shot
    incremental sessions.

    Base classes are the lowest `base_count` class ids in ascending order; the
    remaining classes are shuffled with `seed` and grouped into sessions. The
    base session uses every training sample of its classes; each incremental
    session draws exactly `shot` training samples per class; the test manifest
    of session t spans all classes seen through t.
    """
    needed = base_count + sessions * way
    if needed > adapter.num_classes:
        raise ScheduleError(
            f"schedule needs {needed} classes (base {base_count} + {sessions}x{way}-way) "
            f"but adapter has {adapter.num_classes}"
        )
    if base_count < 1 or way < 1 or shot < 1 or sessions < 0:
        raise ScheduleError("base_count, way, shot must be >= 1 and sessions >= 0")

    ordered = sorted(adapter.class_ids)
    base = ordered[:base_count]
    novel_pool = ordered[base_count:base_count + sessions * way]
    rng = np.random.default_rng(seed)
    novel_pool = [novel_pool[i] for i in rng.permutation(len(novel_pool))]

    blocks: list[SessionBlock] = []
    train_manifests: dict[int, dict[int, list[str]]] = {}
    test_manifests: dict[int, dict[int, list[str]]] = {}

    train_manifests[0] = {c: sorted(adapter.sample_ids(c, "train")) for c in base}
    for t in range(1, sessions + 1):
        group = sorted(novel_pool[(t - 1) * way: t * way])
        manifest: dict[int, list[str]] = {}
        for c in group:
            pool = sorted(adapter.sample_ids(c, "train"))
            if len(pool) < shot:
                raise ScheduleError(
                    f"class {c} has {len(pool)} train samples, needs shot={shot}"
                )
            picks = rng.choice(len(pool), size=shot, replace=False)
            manifest[c] = [pool[i] for i in sorted(picks)]
        blocks.append(SessionBlock(way=way, shot=shot, class_ids=tuple(group)))
        train_manifests[t] = manifest

    seen: list[int] = list(base)
    test_manifests[0] = {c: sorted(adapter.sample_ids(c, "test")) for c in seen}
    for t, block in enumerate(blocks, start=1):
        seen.extend(block.class_ids)
        test_manifests[t] = {c: sorted(adapter.sample_ids(c, "test")) for c in seen}

    return SessionSchedule(
        base_classes=tuple(base),
        incremental_sessions=tuple(blocks),
        train_manifests=train_manifests,
        test_manifests=test_manifests,
    )
