"""Online visual dictionary: nearest-neighbor codebook with momentum updates.

The codebook quantizes grid features to their nearest entries. Entries are
never trained by gradients; they follow assigned features through an
exponential moving average, applied once per optimizer step. The quantizer's
backward pass is the straight-through surrogate, so the encoder keeps
receiving gradients while the argmin stays opaque.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError


@dataclass
class Codebook:
    """k x c entry matrix plus per-entry cumulative assignment counts."""

    entries: Tensor          # (k, c), requires_grad is always False
    counts: np.ndarray       # (k,) int64, monotonically non-decreasing
    gamma: float
    _sq_norms: np.ndarray | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    @property
    def c(self) -> int:
        return self.entries.shape[1]

    def entry_sq_norms(self) -> np.ndarray:
        if self._sq_norms is None:
            self._sq_norms = (self.entries.data ** 2).sum(axis=1)
        return self._sq_norms

    def invalidate_cache(self):
        self._sq_norms = None


@dataclass
class Assignment:
    """Per-token nearest entry indices and the inverse index -> positions map."""

    indices: np.ndarray                      # (l,) int64
    inverse_map: dict[int, np.ndarray]       # entry index -> token positions

    @property
    def l(self) -> int:
        return self.indices.size

    def distinct_indices(self) -> np.ndarray:
        return np.array(sorted(self.inverse_map), dtype=np.int64)


def init_codebook(k: int, c: int, seed: int, gamma: float = 0.99, dtype=np.float64) -> Codebook:
    """Entries i.i.d. uniform in [-1/sqrt(c), +1/sqrt(c)], counts zero."""
    if k < 2 or c < 1:
        raise ValueError(f"need k >= 2 and c >= 1, got k={k}, c={c}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(c)
    entries = rng.uniform(-bound, bound, size=(k, c)).astype(dtype)
    return Codebook(
        entries=Tensor(entries, requires_grad=False),
        counts=np.zeros(k, dtype=np.int64),
        gamma=gamma,
    )


def _feature_matrix(features) -> np.ndarray:
    if hasattr(features, "features"):  # VisualFeatureMap
        features = features.features
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    if data.ndim == 3:
        data = data.reshape(-1, data.shape[-1])
    return data


def assign(features, book: Codebook) -> Assignment:
    """Nearest entry per token; ties break to the lowest index. No gradients.

    Distances use the expanded form |v|^2 - 2 v.d + |d|^2 with cached entry
    norms, one (l x k) matrix product per call.
    """
    v = _feature_matrix(features)
    if v.shape[-1] != book.c:
        raise DimensionError(f"feature dim {v.shape[-1]} != codebook dim {book.c}")
    d2 = book.entry_sq_norms()[None, :] - 2.0 * (v @ book.entries.data.T)
    indices = np.argmin(d2, axis=1).astype(np.int64)  # argmin takes the first minimum
    inverse: dict[int, np.ndarray] = {
        int(j): np.flatnonzero(indices == j) for j in np.unique(indices)
    }
    return Assignment(indices=indices, inverse_map=inverse)


def embed(features, assignment: Assignment, book: Codebook) -> Tensor:
    """Quantized embeddings d_{h_i} with the straight-through gradient.

    Forward value at token i is exactly entry h_i. Backward treats the
    quantizer as the identity on the feature path; entries receive zero
    gradient from any task loss.
    """
    feats = features.features if hasattr(features, "features") else features
    if not isinstance(feats, Tensor):
        feats = Tensor(feats)
    flat_shape = feats.data.shape
    l = int(np.prod(flat_shape[:-1]))
    if assignment.l != l:
        raise ContractError(
            f"stale assignment: covers {assignment.l} tokens, features have {l}"
        )
    quantized = book.entries.data[assignment.indices].reshape(flat_shape)
    return ad.straight_through(feats, quantized)


def momentum_update(book: Codebook, features, assignment: Assignment) -> Codebook:
    """EMA update d_j <- gamma*d_j + (1-gamma)*mean(assigned v_i), in place.

    Entries with empty groups are untouched. Counts grow by group sizes.
    Feature values are used detached; no gradient is involved.
    """
    v = _feature_matrix(features)
    if assignment.l != v.shape[0]:
        raise ContractError(
            f"assignment covers {assignment.l} tokens, features have {v.shape[0]}"
        )
    sums = np.zeros_like(book.entries.data)
    np.add.at(sums, assignment.indices, v)
    group_sizes = np.bincount(assignment.indices, minlength=book.k)
    used = group_sizes > 0
    means = sums[used] / group_sizes[used, None]
    g = book.gamma
    book.entries.data[used] = g * book.entries.data[used] + (1.0 - g) * means
    book.counts += group_sizes
    book.invalidate_cache()
    return book


@dataclass
class UtilizationReport:
    """Codebook usage diagnostics for one dataset pass."""

    fraction_used: float
    histogram: np.ndarray
    perplexity: float


def utilization(histogram: np.ndarray) -> UtilizationReport:
    """Usage stats from a per-entry assignment histogram.

    Perplexity is the exponentiated entropy of the empirical assignment
    distribution: 1 when everything collapses to one entry, k when uniform.
    """
    histogram = np.asarray(histogram)
    total = histogram.sum()
    if total <= 0:
        raise ContractError("utilization needs at least one assignment")
    p = histogram[histogram > 0] / total
    entropy = float(-(p * np.log(p)).sum())
    return UtilizationReport(
        fraction_used=float((histogram > 0).mean()),
        histogram=histogram,
        perplexity=float(np.exp(entropy)),
    )
