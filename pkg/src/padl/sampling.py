"""Per-pixel Gaussian sampling with reparameterized gradients, and the training loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, binary_cross_entropy, sigmoid
from .errors import DataError, DimensionError, DomainError

BCE_EPS = 1e-7


@dataclass
class SamplePrediction:
    raw_sample: Tensor
    prob_sample: Tensor
    noise: np.ndarray
    noise_seed: int | None = None


def reparameterize(mu: Tensor, sigma: Tensor, noise: np.ndarray) -> Tensor:
    """``mu + sigma * noise`` with d/dmu = 1 and d/dsigma = noise.

    Where ``sigma`` is exactly zero the output is ``mu`` itself, bit for bit.
    """
    if mu.shape != sigma.shape or noise.shape != mu.shape:
        raise DimensionError(f"mu {mu.shape}, sigma {sigma.shape} and noise {noise.shape} must match")
    noise = noise.astype(mu.dtype, copy=False)
    out = np.where(sigma.data == 0, mu.data, mu.data + sigma.data * noise)

    def backward_fn(g):
        return g, g * noise

    return Tensor._from_op(out, (mu, sigma), backward_fn, "reparameterize")


def gaussian_sample(mu: Tensor, sigma: Tensor, seed: int | np.random.Generator) -> SamplePrediction:
    """Draw one sample of ``N(mu, sigma^2)`` per pixel and squash it with a sigmoid.

    ``seed`` is either an integer (a fresh generator is built from it) or a
    generator owned by the caller, which is advanced.
    """
    if np.any(sigma.data < 0):
        raise DomainError("sigma must be non-negative everywhere")
    rng = np.random.default_rng(seed)
    dtype = mu.dtype if mu.dtype in (np.float32, np.float64) else np.float64
    noise = rng.standard_normal(mu.shape, dtype=dtype)
    raw = reparameterize(mu, sigma, noise)
    return SamplePrediction(raw, sigmoid(raw), noise, seed if isinstance(seed, (int, np.integer)) else None)


def bce_loss(target, prediction: Tensor, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy (natural log) over every pixel and channel."""
    return binary_cross_entropy(target, prediction, eps)


def select_annotations(count: int, annotator_count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform annotator indices (0-based), one fresh draw per image."""
    if annotator_count < 1:
        raise DataError("cannot select from an empty annotation set")
    return rng.integers(annotator_count, size=count)


def select_annotation(masks: Sequence[np.ndarray], seed: int | np.random.Generator) -> tuple[np.ndarray, int]:
    if len(masks) == 0:
        raise DataError("cannot select from an empty annotation set")
    rng = np.random.default_rng(seed)
    index = int(rng.integers(len(masks)))
    return masks[index], index


@dataclass
class LossBreakdown:
    loss: Tensor
    l_meta: float
    l_pref: list[float] = field(default_factory=list)
    selected_annotation: object = None

    @property
    def total(self) -> float:
        return float(self.loss.data)

    def record(self) -> dict:
        return {"l_meta": self.l_meta, "l_pref": list(self.l_pref), "total": self.total}


def total_loss(
    meta_sample: Tensor | None,
    y_s,
    pref_samples: Sequence[Tensor],
    annotations: Sequence,
    selected_annotation=None,
) -> LossBreakdown:
    """``L = BCE(y_s, meta_sample) + sum_r BCE(y_r, pref_sample_r)``.

    ``meta_sample`` may be None (no meta term) and ``pref_samples`` may be
    empty (no preference heads).
    """
    if pref_samples and len(annotations) != len(pref_samples):
        raise DataError(f"{len(pref_samples)} preference heads but {len(annotations)} annotations")
    terms = []
    l_meta = 0.0
    if meta_sample is not None:
        meta = bce_loss(y_s, meta_sample)
        l_meta = float(meta.data)
        terms.append(meta)
    l_pref = []
    for r, pred in enumerate(pref_samples):
        if annotations[r] is None:
            raise DataError(f"annotation of annotator {r + 1} is missing")
        term = bce_loss(annotations[r], pred)
        l_pref.append(float(term.data))
        terms.append(term)
    if not terms:
        raise DataError("loss has no terms")
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return LossBreakdown(loss, l_meta, l_pref, selected_annotation)
