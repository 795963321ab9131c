"""Determinant diversity of pooled feature maps.

The chain: pool each learner's C×H×W map across channels (spatial view)
or across space (channel view), average the RBF similarity
``exp(-gamma * ||a - b||^2)`` of every learner pair over the mini-batch,
and score diversity as the determinant of the resulting L×L similarity
matrix. Near 0 when learners are redundant, near 1 when pairwise
dissimilar.

Two independent routes are provided on purpose: plain-array functions
(`similarity_matrix`, `lu_det`, `det_gradient`, `diversity`) for direct
verification, and tape-registered ops (`similarity_matrix_t`, `det_t`,
`diversity_from_features`) that make the whole chain differentiable down
to raw features. The determinant gradient is the explicit cofactor
(adjugate-transpose) matrix, which stays well-defined at singular
matrices — exactly the all-identical-features starting point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .autodiff import ShapeMismatch, Tensor, accumulate, exp, reshape, tmean, tsum
from .nn import reduce_max

Dimension = Literal["spatial", "channel", "branch"]
PoolOp = Literal["mean", "max"]


@dataclass(frozen=True)
class SimilarityConfig:
    """Eq/knob bundle for the similarity matrix: ``sample_count`` is the
    mini-batch size N the pairwise similarities are averaged over;
    ``gamma`` None means auto = 1/P with P the flattened pooled length,
    keeping the exponent scale-comparable across spatial and channel
    views. ``pool_op`` and ``normalize`` are ablation switches."""

    sample_count: int
    gamma: float | None = None
    pool_op: PoolOp = "mean"
    normalize: bool = False

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.pool_op not in ("mean", "max"):
            raise ValueError(f"pool_op must be 'mean' or 'max', got {self.pool_op!r}")


def auto_gamma(pooled_length: int) -> float:
    return 1.0 / float(pooled_length)


@dataclass(frozen=True)
class PooledFeature:
    """One learner's pooled map for one sample: (1,H,W) spatial or
    (C,1,1) channel."""

    learner_id: int
    kind: Literal["spatial", "channel"]
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"pooled feature must be 3-d, got shape {v.shape}")
        if self.kind == "spatial" and v.shape[0] != 1:
            raise ValueError(f"spatial pooled feature needs shape (1,H,W), got {v.shape}")
        if self.kind == "channel" and v.shape[1:] != (1, 1):
            raise ValueError(f"channel pooled feature needs shape (C,1,1), got {v.shape}")
        if self.kind not in ("spatial", "channel"):
            raise ValueError(f"unknown pooled kind {self.kind!r}")


@dataclass
class SimilarityMatrix:
    """L×L sample-averaged RBF similarities: symmetric, unit diagonal,
    entries in (0,1] (exact 0 only via float underflow at extreme gamma),
    PSD up to rounding as an average of Gaussian Gram matrices."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError(f"similarity matrix must be square, got shape {e.shape}")
        if not np.array_equal(e, e.T):
            raise ValueError("similarity matrix must be exactly symmetric")
        if not np.all(np.diag(e) == 1.0):
            raise ValueError("similarity matrix diagonal must be exactly 1")
        if e.min() < 0.0 or e.max() > 1.0:
            raise ValueError("similarity entries must lie in [0, 1]")
        self.entries = e

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass
class DiversityScore:
    """det(S) plus which dimension it measures; ``node`` carries the
    autodiff handle when the score came from a differentiable chain."""

    value: float
    dimension: Dimension
    node: Tensor | None = None


# ---------------------------------------------------------------------------
# plain-array route

def _stack_pooled(pooled, n_expected: int | None = None) -> np.ndarray:
    """Normalize per-learner pooled inputs to an (L, N, P) float array.

    Each learner entry is an (N, ...) array or a sequence of per-sample
    PooledFeatures; kinds must agree across all learners.
    """
    stacks = []
    kinds = set()
    for learner in pooled:
        if isinstance(learner, PooledFeature):
            raise TypeError("pass a sequence of per-sample PooledFeatures per learner")
        if not isinstance(learner, np.ndarray):
            learner = list(learner)
        if len(learner) and not isinstance(learner, np.ndarray) \
                and isinstance(learner[0], PooledFeature):
            kinds.update(s.kind for s in learner)
            arr = np.stack([np.asarray(s.values, dtype=np.float64) for s in learner])
        else:
            arr = np.asarray(learner, dtype=np.float64)
        stacks.append(arr.reshape(arr.shape[0], -1))
    if len(kinds) > 1:
        raise ValueError(f"mixed pooled kinds across learners: {sorted(kinds)}")
    if not stacks:
        raise ValueError("need at least one learner")
    shape = stacks[0].shape
    for arr in stacks:
        if arr.shape != shape:
            raise ShapeMismatch("pairwise_similarity", *(a.shape for a in stacks))
    if n_expected is not None and shape[0] != n_expected:
        raise ValueError(f"sample count mismatch: got {shape[0]}, config says {n_expected}")
    return np.stack(stacks)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.sqrt((a * a).sum(axis=1))
    safe = np.where(norms == 0.0, 1.0, norms)
    return a / safe[:, None]


def similarity_matrix(pooled, gamma: float | None = None, normalize: bool = False) -> np.ndarray:
    """(L,L) array of batch-averaged RBF similarities; diagonal forced to
    exactly 1, each unordered pair computed once (exact symmetry)."""
    feats = _stack_pooled(pooled)
    length, n, p = feats.shape
    if gamma is None:
        gamma = auto_gamma(p)
    if normalize:
        feats = np.stack([_unit_rows(f) for f in feats])
    s = np.eye(length)
    for l in range(length):
        for k in range(l + 1, length):
            d2 = ((feats[l] - feats[k]) ** 2).sum(axis=1)
            s[l, k] = s[k, l] = np.exp(-gamma * d2).mean()
    return s


def pairwise_similarity(pooled, config: SimilarityConfig) -> SimilarityMatrix:
    feats = _stack_pooled(pooled, n_expected=config.sample_count)
    gamma = config.gamma if config.gamma is not None else auto_gamma(feats.shape[2])
    return SimilarityMatrix(similarity_matrix(list(feats), gamma=gamma, normalize=config.normalize))


def lu_det(matrix: np.ndarray) -> float:
    """Determinant by LU with partial pivoting; 0 on a vanishing pivot."""
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch("lu_det", a.shape)
    n = a.shape[0]
    if n == 0:
        return 1.0
    sign = 1.0
    for col in range(n):
        piv = int(np.argmax(np.abs(a[col:, col]))) + col
        if a[piv, col] == 0.0:
            return 0.0
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            sign = -sign
        for row in range(col + 1, n):
            f = a[row, col] / a[col, col]
            a[row, col:] -= f * a[col, col:]
    det = sign
    for i in range(n):
        det *= a[i, i]
    return float(det)


def det_gradient(matrix: np.ndarray) -> np.ndarray:
    """d det / d entries: the cofactor matrix (adjugate transposed), built
    from (L-1)×(L-1) minor determinants; finite even at singular input."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch("det_gradient", a.shape)
    n = a.shape[0]
    grad = np.empty((n, n))
    rows = np.arange(n)
    for i in range(n):
        for j in range(n):
            minor = a[np.ix_(rows != i, rows != j)]
            grad[i, j] = (-1.0) ** (i + j) * lu_det(minor)
    return grad


def diversity(similarity, dimension: Dimension) -> DiversityScore:
    entries = similarity.entries if isinstance(similarity, SimilarityMatrix) else np.asarray(similarity)
    return DiversityScore(value=lu_det(entries), dimension=dimension)


# ---------------------------------------------------------------------------
# differentiable route

def spatial_pool(feature: Tensor, op: PoolOp = "mean") -> Tensor:
    """Across-channel pooling: (C,H,W) -> (1,H,W), batched alike."""
    if feature.data.ndim == 3:
        axis = 0
    elif feature.data.ndim == 4:
        axis = 1
    else:
        raise ShapeMismatch("spatial_pool", feature.data.shape)
    if op == "max":
        return reduce_max(feature, axis=axis, keepdims=True)
    return tmean(feature, axis=axis, keepdims=True)


def channel_pool(feature: Tensor, op: PoolOp = "mean") -> Tensor:
    """Across-space pooling: (C,H,W) -> (C,1,1), batched alike."""
    if feature.data.ndim == 3:
        axis = (1, 2)
    elif feature.data.ndim == 4:
        axis = (2, 3)
    else:
        raise ShapeMismatch("channel_pool", feature.data.shape)
    if op == "max":
        return reduce_max(feature, axis=axis, keepdims=True)
    return tmean(feature, axis=axis, keepdims=True)


def unit_normalize(x: Tensor) -> Tensor:
    """Scale each row of (N,P) to unit L2 norm; zero rows pass through."""
    if x.data.ndim != 2:
        raise ShapeMismatch("unit_normalize", x.data.shape)
    norms = np.sqrt((x.data * x.data).sum(axis=1))
    safe = np.where(norms == 0.0, 1.0, norms)
    out = x.data / safe[:, None]

    def back(g):
        dots = (g * x.data).sum(axis=1)
        accumulate(x, g / safe[:, None] - x.data * (dots / safe ** 3)[:, None])

    return Tensor.from_op(out, (x,), back, "unit_normalize")


def _flatten_samples(t: Tensor) -> Tensor:
    n = t.data.shape[0]
    return reshape(t, (n, t.data.size // n))


def similarity_matrix_t(pooled: Sequence[Tensor], gamma: float | None = None,
                        normalize: bool = False) -> Tensor:
    """Differentiable (L,L) similarity matrix from per-learner (N,...)
    pooled tensors; gradient reaches every pooled tensor."""
    if not pooled:
        raise ValueError("need at least one learner")
    flat = [_flatten_samples(p) for p in pooled]
    shape = flat[0].data.shape
    for f in flat:
        if f.data.shape != shape:
            raise ShapeMismatch("similarity_matrix_t", *(f.data.shape for f in flat))
    length = len(flat)
    if gamma is None:
        gamma = auto_gamma(shape[1])
    if normalize:
        flat = [unit_normalize(f) for f in flat]

    neg_gamma = Tensor(-gamma)
    pairs: list[tuple[int, int]] = []
    entries: list[Tensor] = []
    for l in range(length):
        for k in range(l + 1, length):
            diff = flat[l] - flat[k]
            d2 = tsum(diff * diff, axis=1)
            entries.append(tmean(exp(d2 * neg_gamma)))
            pairs.append((l, k))

    data = np.eye(length)
    for (l, k), e in zip(pairs, entries):
        data[l, k] = data[k, l] = float(e.data)

    def back(g):
        for (l, k), e in zip(pairs, entries):
            accumulate(e, np.asarray(g[l, k] + g[k, l]))

    return Tensor.from_op(data, tuple(entries), back, "similarity_assemble")


def det_t(similarity: Tensor) -> Tensor:
    """Differentiable determinant: LU forward, cofactor-matrix backward."""
    sd = similarity.data
    if sd.ndim != 2 or sd.shape[0] != sd.shape[1]:
        raise ShapeMismatch("det", sd.shape)
    value = lu_det(sd)

    def back(g):
        accumulate(similarity, float(g) * det_gradient(sd))

    return Tensor.from_op(np.asarray(value), (similarity,), back, "det")


def diversity_of_pooled(pooled: Sequence[Tensor], dimension: Dimension,
                        gamma: float | None = None, normalize: bool = False) -> DiversityScore:
    """Diversity of already-pooled per-learner (N,...) tensors, carrying
    the autodiff node for loss composition."""
    node = det_t(similarity_matrix_t(pooled, gamma=gamma, normalize=normalize))
    return DiversityScore(value=float(node.data), dimension=dimension, node=node)


def diversity_from_features(features: Sequence[Tensor],
                            config: SimilarityConfig) -> tuple[DiversityScore, DiversityScore]:
    """Spatial and channel diversity of per-learner (N,C,H,W) feature
    batches; the full pooling -> similarity -> det chain is differentiable
    down to the raw features."""
    if not features:
        raise ValueError("need at least one learner")
    shape = features[0].data.shape
    for f in features:
        if f.data.ndim != 4 or f.data.shape != shape:
            raise ShapeMismatch("diversity_from_features", *(f.data.shape for f in features))
    if shape[0] != config.sample_count:
        raise ValueError(f"sample count mismatch: got {shape[0]}, config says {config.sample_count}")

    sp = [spatial_pool(f, op=config.pool_op) for f in features]
    ch = [channel_pool(f, op=config.pool_op) for f in features]
    d_sp = diversity_of_pooled(sp, "spatial", gamma=config.gamma, normalize=config.normalize)
    d_ch = diversity_of_pooled(ch, "channel", gamma=config.gamma, normalize=config.normalize)
    return d_sp, d_ch


def measure_diversity(pooled_arrays, dimension: Dimension, gamma: float | None = None,
                      normalize: bool = False) -> DiversityScore:
    """Observation-only diversity from raw arrays (no tape, no RNG); used
    for metric logging without touching the training graph."""
    s = similarity_matrix(pooled_arrays, gamma=gamma, normalize=normalize)
    return DiversityScore(value=lu_det(s), dimension=dimension)
