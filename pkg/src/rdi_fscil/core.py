"""Shared domain types: feature maps, masks, pooled features, the cosine
classifier, session schedules, prototype stores, and evaluation reports.

Everything here is construction + validation + (de)serialization; the math
lives in the other modules. All types are treated as immutable once built.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import torch

SCHEMA_VERSION = 1

NORM_EPS = 1e-12  # added inside every L2-normalization denominator


class RdiError(Exception):
    """Base class for errors raised by this package."""


class DegenerateFeatureError(RdiError):
    """A zero feature vector was passed where cosine scoring needs a direction."""


class ScheduleError(RdiError):
    """A session schedule could not be constructed or is structurally invalid."""


class DivergenceError(RdiError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, dump: Optional[dict] = None):
        super().__init__(message)
        self.dump = dump or {}


class MaskKind(Enum):
    ALR = "alr"  # activated label-relevant ("central") patches
    ALI = "ali"  # activated label-irrelevant ("redundant") patches


class PoolSource(Enum):
    NONE = "none"
    ALR = "alr"
    ALI = "ali"


@dataclass(frozen=True)
class FeatureMap:
    """A (h, w, d) channel-last feature map from the last conv stage."""

    values: torch.Tensor

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ValueError(f"feature map must be rank-3 (h, w, d), got shape {tuple(self.values.shape)}")
        if not bool(torch.isfinite(self.values.detach()).all()):
            raise ValueError("feature map contains NaN or Inf")

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def patch(self, a: int, b: int) -> torch.Tensor:
        """The d-vector at spatial cell (a, b)."""
        return self.values[a, b]


@dataclass(frozen=True)
class PatchMask:
    """Binary (h, w) patch selection grid."""

    bits: torch.Tensor
    kind: MaskKind

    def __post_init__(self):
        if self.bits.dim() != 2:
            raise ValueError("mask must be rank-2 (h, w)")
        b = self.bits.detach()
        if not bool(((b == 0) | (b == 1)).all()):
            raise ValueError("mask entries must be 0 or 1")

    @property
    def support(self) -> int:
        """Number of selected patches."""
        return int(self.bits.detach().sum().item())

    def complement(self) -> "PatchMask":
        """Flip every bit; an ALR mask complements to ALI and vice versa."""
        other = MaskKind.ALI if self.kind == MaskKind.ALR else MaskKind.ALR
        return PatchMask(bits=1 - self.bits, kind=other)


@dataclass(frozen=True)
class PooledFeature:
    """A d-vector produced by (possibly masked) spatial pooling."""

    vector: torch.Tensor
    source_mask_kind: PoolSource = PoolSource.NONE
    support_count: int = 0

    def __post_init__(self):
        if self.vector.dim() != 1:
            raise ValueError("pooled feature must be a 1-D vector")
        if self.support_count < 0:
            raise ValueError("support_count must be >= 0")

    @property
    def d(self) -> int:
        return self.vector.shape[0]


class CosineClassifier(torch.nn.Module):
    """Weight matrix of shape (d, m), one column per class, scored through
    temperature-scaled cosine similarity. May carry one trailing dummy column
    that absorbs label-irrelevant features during base training; the dummy is
    never a legal prediction.
    """

    def __init__(self, weight: torch.Tensor, temperature: float = 16.0,
                 dummy_index: Optional[int] = None):
        super().__init__()
        if weight.dim() != 2:
            raise ValueError("classifier weight must be (d, m)")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        col_norms = weight.detach().norm(dim=0)
        if bool((col_norms == 0).any()):
            raise ValueError("classifier has a zero weight column")
        if dummy_index is not None and dummy_index != weight.shape[1] - 1:
            raise ValueError("dummy_index must be the last column")
        self.weight = torch.nn.Parameter(weight)
        self.temperature = float(temperature)
        self.dummy_index = dummy_index

    @classmethod
    def random_init(cls, d: int, m: int, temperature: float = 16.0,
                    seed: int = 0) -> "CosineClassifier":
        gen = torch.Generator().manual_seed(seed)
        w = torch.randn(d, m, generator=gen)
        w = w / (w.norm(dim=0, keepdim=True) + NORM_EPS)
        return cls(w, temperature=temperature)

    @property
    def d(self) -> int:
        return self.weight.shape[0]

    @property
    def num_columns(self) -> int:
        return self.weight.shape[1]

    @property
    def num_real_classes(self) -> int:
        return self.num_columns - (1 if self.dummy_index is not None else 0)

    def normalized_weight(self) -> torch.Tensor:
        return self.weight / (self.weight.norm(dim=0, keepdim=True) + NORM_EPS)

    def batched_logits(self, features: torch.Tensor, columns: Optional[slice] = None) -> torch.Tensor:
        """Temperature-scaled cosine logits for a (B, d) feature batch."""
        w = self.normalized_weight()
        if columns is not None:
            w = w[:, columns]
        f = features / (features.norm(dim=1, keepdim=True) + NORM_EPS)
        return self.temperature * (f @ w)


@dataclass(frozen=True)
class SessionBlock:
    """One incremental session: an N-way K-shot class group."""

    way: int
    shot: int
    class_ids: tuple[int, ...]


@dataclass(frozen=True)
class SessionSchedule:
    """The full curriculum: base label space, per-session novel label spaces,
    and train/test sample manifests keyed by session index.
    """

    base_classes: tuple[int, ...]
    incremental_sessions: tuple[SessionBlock, ...]
    # session index -> class id -> sample ids
    train_manifests: dict = field(default_factory=dict)
    test_manifests: dict = field(default_factory=dict)

    @property
    def num_sessions(self) -> int:
        return 1 + len(self.incremental_sessions)

    def classes_of_session(self, t: int) -> tuple[int, ...]:
        if t == 0:
            return self.base_classes
        return self.incremental_sessions[t - 1].class_ids

    def classes_through(self, t: int) -> tuple[int, ...]:
        out: list[int] = []
        for s in range(t + 1):
            out.extend(self.classes_of_session(s))
        return tuple(out)

    def novel_classes_through(self, t: int) -> tuple[int, ...]:
        out: list[int] = []
        for s in range(1, t + 1):
            out.extend(self.classes_of_session(s))
        return tuple(out)

    def cumulative_class_counts(self) -> list[int]:
        return [len(self.classes_through(t)) for t in range(self.num_sessions)]

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "base_classes": list(self.base_classes),
            "incremental_sessions": [
                {"way": s.way, "shot": s.shot, "class_ids": list(s.class_ids)}
                for s in self.incremental_sessions
            ],
            "train_manifests": {
                str(t): {str(c): list(ids) for c, ids in per.items()}
                for t, per in self.train_manifests.items()
            },
            "test_manifests": {
                str(t): {str(c): list(ids) for c, ids in per.items()}
                for t, per in self.test_manifests.items()
            },
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SessionSchedule":
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise ScheduleError(f"unsupported schedule schema_version {obj.get('schema_version')!r}")
        return cls(
            base_classes=tuple(obj["base_classes"]),
            incremental_sessions=tuple(
                SessionBlock(way=s["way"], shot=s["shot"], class_ids=tuple(s["class_ids"]))
                for s in obj["incremental_sessions"]
            ),
            train_manifests={
                int(t): {int(c): list(ids) for c, ids in per.items()}
                for t, per in obj["train_manifests"].items()
            },
            test_manifests={
                int(t): {int(c): list(ids) for c, ids in per.items()}
                for t, per in obj["test_manifests"].items()
            },
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SessionSchedule":
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


def validate_schedule(schedule: SessionSchedule) -> list[str]:
    """Check a schedule against the curriculum contract.

    Returns a list of human-readable violations; an empty list means valid.
    """
    violations: list[str] = []

    seen: set[int] = set()
    for t in range(schedule.num_sessions):
        classes = schedule.classes_of_session(t)
        overlap = seen.intersection(classes)
        if overlap:
            violations.append(
                f"overlapping label spaces: session {t} reuses classes {sorted(overlap)}"
            )
        if len(set(classes)) != len(classes):
            violations.append(f"session {t} lists a class twice")
        seen.update(classes)

    for i, block in enumerate(schedule.incremental_sessions, start=1):
        if len(block.class_ids) != block.way:
            violations.append(
                f"session {i} declares way={block.way} but lists {len(block.class_ids)} classes"
            )
        manifest = schedule.train_manifests.get(i, {})
        for c in block.class_ids:
            n = len(manifest.get(c, []))
            if n != block.shot:
                violations.append(
                    f"session {i} class {c} has {n} train samples, expected shot={block.shot}"
                )

    for t in range(schedule.num_sessions):
        manifest = schedule.test_manifests.get(t, {})
        missing = [c for c in schedule.classes_through(t) if not manifest.get(c)]
        if missing:
            violations.append(
                f"test manifest of session {t} misses classes {missing}"
            )

    return violations


@dataclass(frozen=True)
class PrototypeStore:
    """Per-class mean embeddings plus the sample counts behind each mean."""

    prototypes: dict  # class id -> PooledFeature
    sample_counts: dict  # class id -> int

    def __post_init__(self):
        dims = {pf.d for pf in self.prototypes.values()}
        if len(dims) > 1:
            raise ValueError(f"prototype dimensions disagree: {sorted(dims)}")
        for c, n in self.sample_counts.items():
            if n < 1:
                raise ValueError(f"class {c} has sample count {n} < 1")

    def class_ids(self) -> list[int]:
        return sorted(self.prototypes)

    def matrix(self, class_order: Optional[list[int]] = None) -> torch.Tensor:
        """Stack prototypes as a (d, m) weight matrix in the given class order."""
        order = class_order if class_order is not None else self.class_ids()
        return torch.stack([self.prototypes[c].vector for c in order], dim=1)


@dataclass(frozen=True)
class EvalReport:
    """Per-session metric record.

    For session 0 there are no novel classes yet, so na_acc, nn_acc and
    confusion_gap are None.
    """

    session: int
    session_top1: float
    ba_acc: float
    aa_acc: float
    na_acc: Optional[float] = None
    nn_acc: Optional[float] = None
    confusion_gap: Optional[float] = None
    diagnostics: Optional[dict] = None

    def __post_init__(self):
        for name in ("session_top1", "ba_acc", "aa_acc", "na_acc", "nn_acc"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.session == 0:
            if self.na_acc is not None or self.nn_acc is not None or self.confusion_gap is not None:
                raise ValueError("session 0 must not carry novel-class metrics")
        else:
            if self.na_acc is None or self.nn_acc is None or self.confusion_gap is None:
                raise ValueError("sessions >= 1 must carry na_acc, nn_acc and confusion_gap")
            if abs(self.confusion_gap - (self.nn_acc - self.na_acc)) > 1e-12:
                raise ValueError("confusion_gap must equal nn_acc - na_acc")

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "session": self.session,
            "session_top1": self.session_top1,
            "ba_acc": self.ba_acc,
            "na_acc": self.na_acc,
            "aa_acc": self.aa_acc,
            "nn_acc": self.nn_acc,
            "confusion_gap": self.confusion_gap,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "EvalReport":
        if obj.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version {obj.get('schema_version')!r}")
        return cls(
            session=obj["session"],
            session_top1=obj["session_top1"],
            ba_acc=obj["ba_acc"],
            na_acc=obj["na_acc"],
            aa_acc=obj["aa_acc"],
            nn_acc=obj["nn_acc"],
            confusion_gap=obj["confusion_gap"],
            diagnostics=obj.get("diagnostics"),
        )
