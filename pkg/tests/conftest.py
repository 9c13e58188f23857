"""Shared fixtures and deterministic helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from rdi_fscil.core import CosineClassifier, FeatureMap


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def random_classifier(rng: np.random.Generator, d: int, m: int,
                      temperature: float = 16.0,
                      dummy: bool = False) -> CosineClassifier:
    """A classifier with non-degenerate random columns."""
    w = rng.standard_normal((d, m)).astype(np.float64)
    # Guard against the (measure-zero) chance of a zero column.
    w += 0.1 * np.sign(w + 1e-9)
    return CosineClassifier(torch.from_numpy(w), temperature=temperature,
                            dummy_index=m - 1 if dummy else None)


def random_fmap(rng: np.random.Generator, h: int, w: int, d: int) -> FeatureMap:
    return FeatureMap(torch.from_numpy(rng.standard_normal((h, w, d))))


@pytest.fixture(autouse=True)
def _torch_determinism():
    torch.manual_seed(0)
    yield
