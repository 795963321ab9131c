"""Training: momentum SGD, loss compositions, and the epoch loop.

The three losses share one shape, classification minus a weighted sum of
diversity scores:

  combined: L - w (D_ch + D_sp)
  ensemble: sum_b L_b - w (D_ch + D_sp), diversity over branch attention maps
  dual:     lam L_local + (1-lam) L_global - w (D_b + D_sp + D_ch)

Subtracting diversity rewards dissimilar learners. Each loss takes
DiversityScores and returns the scalar loss tensor plus a LossBreakdown
whose total recomposes from the parts. With weight 0 the diversity terms
never enter the graph, so a weight-0 run and a switches-off run follow
bit-identical parameter trajectories; scores are still logged through a
tape-free measurement pass.

The ensemble grows on a schedule: at the start of epoch e (0-based), a
branch is added when e > 0, e is a multiple of the add interval, and the
cap is not reached. Every add runs a probe forward to confirm existing
branch outputs are bit-identical before and after.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward
from .data import batches
from .diversity import (DiversityScore, channel_pool, diversity_of_pooled,
                        measure_diversity, spatial_pool)
from .models import (DualBranchModel, EnsembleModel, add_branch, dual_predict,
                     ensemble_predict)
from .nn import softmax_cross_entropy


class NonFiniteLossError(RuntimeError):
    """Loss went NaN or infinite; message names epoch, batch, components."""

    def __init__(self, epoch: int, batch_index: int, breakdown: "LossBreakdown"):
        self.epoch = epoch
        self.batch_index = batch_index
        self.breakdown = breakdown
        parts = [f"total={breakdown.total}", f"classification={breakdown.classification}"]
        for name in ("d_sp", "d_ch", "d_branch"):
            v = getattr(breakdown, name)
            if v is not None:
                parts.append(f"{name}={v}")
        super().__init__(
            f"non-finite loss at epoch {epoch + 1}, batch {batch_index}: " + ", ".join(parts))


@dataclass
class LossBreakdown:
    classification: float
    d_sp: float | None
    d_ch: float | None
    d_branch: float | None
    total: float

    def finite(self) -> bool:
        vals = [self.total, self.classification, self.d_sp, self.d_ch, self.d_branch]
        return all(np.isfinite(v) for v in vals if v is not None)


class SGD:
    """v <- momentum v + g; theta <- theta - lr v. Velocity is kept per
    parameter tensor, so parameters added mid-run start from v = 0."""

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        if not learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: dict[int, np.ndarray] = {}

    def zero_grad(self, params):
        for p in params:
            p.grad = None

    def step(self, params):
        for p in params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.velocity.get(id(p))
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[id(p)] = v
            p.data = p.data - self.learning_rate * v


def _score_value(score) -> float | None:
    return None if score is None else float(score.value)


def _penalty_terms(total: Tensor, scores, weight: float) -> Tensor:
    """total - weight * sum(scores); scores without a graph node enter as
    constants, and weight 0 leaves the graph untouched."""
    if weight == 0.0:
        return total
    terms = []
    for s in scores:
        if s is None:
            continue
        terms.append(s.node if s.node is not None else Tensor(s.value))
    if not terms:
        return total
    penalty = terms[0]
    for t in terms[1:]:
        penalty = penalty + t
    return total + penalty * Tensor(-weight)


def combined_loss(cls_loss: Tensor, d_ch: DiversityScore | None,
                  d_sp: DiversityScore | None, weight: float):
    """L - weight (D_ch + D_sp) -> (scalar tensor, LossBreakdown)."""
    total = _penalty_terms(cls_loss, (d_ch, d_sp), weight)
    bd = LossBreakdown(classification=float(cls_loss.data), d_sp=_score_value(d_sp),
                       d_ch=_score_value(d_ch), d_branch=None, total=float(total.data))
    return total, bd


def esr_loss(branch_losses, d_ch: DiversityScore | None,
             d_sp: DiversityScore | None, weight: float):
    """sum_b L_b - weight (D_ch + D_sp) -> (scalar tensor, LossBreakdown)."""
    if not branch_losses:
        raise ValueError("need at least one branch loss")
    cls = branch_losses[0]
    for l in branch_losses[1:]:
        cls = cls + l
    total = _penalty_terms(cls, (d_ch, d_sp), weight)
    bd = LossBreakdown(classification=float(cls.data), d_sp=_score_value(d_sp),
                       d_ch=_score_value(d_ch), d_branch=None, total=float(total.data))
    return total, bd


def manet_loss(l_local: Tensor, l_global: Tensor, d_b: DiversityScore | None,
               d_sp: DiversityScore | None, d_ch: DiversityScore | None,
               lambda_balance: float, weight: float):
    """lam L_local + (1-lam) L_global - weight (D_b + D_sp + D_ch)."""
    if not 0.0 <= lambda_balance <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lambda_balance}")
    cls = l_local * Tensor(lambda_balance) + l_global * Tensor(1.0 - lambda_balance)
    total = _penalty_terms(cls, (d_b, d_sp, d_ch), weight)
    bd = LossBreakdown(classification=float(cls.data), d_sp=_score_value(d_sp),
                       d_ch=_score_value(d_ch), d_branch=_score_value(d_b),
                       total=float(total.data))
    return total, bd


@dataclass
class EpochRecord:
    epoch: int  # 1-based
    branch_count: int
    train_acc: float
    test_acc: float
    loss_total: float
    loss_cls: float
    d_sp: float | None
    d_ch: float | None
    d_branch: float | None


@dataclass
class BranchAddCheck:
    epoch: int  # 1-based epoch the add happened at the start of
    branch_count: int
    bit_exact: bool
    max_abs_diff: float


@dataclass
class TrainResult:
    records: list[EpochRecord]
    add_checks: list[BranchAddCheck]


@dataclass
class EvalReport:
    accuracy: float  # majority vote / mixed-softmax accuracy
    per_class: list[float | None]
    per_branch: list[float]


def _mean_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _pooled_score(pooled, dimension, cfg, build_node) -> DiversityScore:
    """Score already-pooled learner tensors; graph node only on request."""
    if build_node:
        return diversity_of_pooled(pooled, dimension, gamma=cfg.gamma,
                                   normalize=cfg.normalize_features)
    return measure_diversity([p.data for p in pooled], dimension, gamma=cfg.gamma,
                             normalize=cfg.normalize_features)


def _map_score(maps_all, which, layer_ids, cfg, build_node) -> DiversityScore:
    """Diversity of attention maps across branches, averaged over the
    tapped layers."""
    scores = []
    for li in layer_ids:
        pooled = [bm[li].spatial_map if which == "spatial" else bm[li].channel_map
                  for bm in maps_all]
        scores.append(_pooled_score(pooled, which, cfg, build_node))
    value = float(np.mean([s.value for s in scores]))
    node = None
    if build_node:
        node = scores[0].node
        for s in scores[1:]:
            node = node + s.node
        if len(scores) > 1:
            node = node * Tensor(1.0 / len(scores))
    return DiversityScore(value=value, dimension=which, node=node)


def _ensemble_step(model: EnsembleModel, xb, yb, cfg):
    logits, maps_all = model.forward(Tensor(xb))
    branch_losses = [softmax_cross_entropy(lg, yb) for lg in logits]

    d_sp = d_ch = None
    if (cfg.diversity_spatial or cfg.diversity_channel) and model.attention_enabled:
        n_layers = len(maps_all[0])
        layer_ids = [n_layers - 1] if cfg.diversity_tap == "last" else list(range(n_layers))
        build = cfg.diversity_weight != 0.0
        if cfg.diversity_spatial:
            d_sp = _map_score(maps_all, "spatial", layer_ids, cfg, build)
        if cfg.diversity_channel:
            d_ch = _map_score(maps_all, "channel", layer_ids, cfg, build)
    return esr_loss(branch_losses, d_ch, d_sp, cfg.diversity_weight)


def _dual_step(model: DualBranchModel, xb, yb, cfg):
    res = model.forward(Tensor(xb))
    l_local = softmax_cross_entropy(res.local_logits, yb)
    l_global = softmax_cross_entropy(res.global_logits, yb)

    d_sp = d_ch = d_b = None
    if cfg.diversity_spatial or cfg.diversity_channel:
        build = cfg.diversity_weight != 0.0
        if cfg.diversity_spatial:
            pooled = [spatial_pool(f, op=cfg.pool_op) for f in res.patch_features]
            d_sp = _pooled_score(pooled, "spatial", cfg, build)
        if cfg.diversity_channel:
            pooled = [channel_pool(f, op=cfg.pool_op) for f in res.patch_features]
            d_ch = _pooled_score(pooled, "channel", cfg, build)
        d_b = _pooled_score(list(res.branch_pooled), "branch", cfg, build)
    return manet_loss(l_local, l_global, d_b, d_sp, d_ch,
                      model.lambda_balance, cfg.diversity_weight)


def _checked_add(model: EnsembleModel, probe_images, epoch: int) -> BranchAddCheck:
    before = None
    if probe_images is not None:
        logits, _ = model.forward(Tensor(probe_images))
        before = [lg.data.copy() for lg in logits]
    add_branch(model)
    bit_exact, max_diff = True, 0.0
    if before is not None:
        logits, _ = model.forward(Tensor(probe_images))
        for old, new in zip(before, logits):
            if not np.array_equal(old, new.data):
                bit_exact = False
                max_diff = max(max_diff, float(np.max(np.abs(old - new.data))))
    return BranchAddCheck(epoch=epoch + 1, branch_count=len(model.branches),
                          bit_exact=bit_exact, max_abs_diff=max_diff)


def predict_dataset(model, dataset, batch_size: int = 64) -> np.ndarray:
    preds = []
    bs = min(batch_size, len(dataset))
    for xb, yb in batches(dataset, bs, shuffle_seed=None):
        x = Tensor(xb)
        if isinstance(model, EnsembleModel):
            logits, _ = model.forward(x)
            preds.append(ensemble_predict(logits))
        else:
            res = model.forward(x)
            preds.append(dual_predict(res.global_logits, res.local_logits,
                                      model.lambda_balance))
    return np.concatenate(preds)


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"shape mismatch: {predictions.shape} vs {labels.shape}")
    return float((predictions == labels).mean())


def evaluate(model, dataset, batch_size: int = 64) -> EvalReport:
    """Overall (vote / mixed) accuracy plus per-class and per-branch.

    Per-branch means each ensemble branch's own argmax; for the dual
    model it is [local head, global head].
    """
    bs = min(batch_size, len(dataset))
    preds, branch_preds = [], None
    for xb, yb in batches(dataset, bs, shuffle_seed=None):
        x = Tensor(xb)
        if isinstance(model, EnsembleModel):
            logits, _ = model.forward(x)
            preds.append(ensemble_predict(logits))
            per = [lg.data.argmax(axis=1) for lg in logits]
        else:
            res = model.forward(x)
            preds.append(dual_predict(res.global_logits, res.local_logits,
                                      model.lambda_balance))
            per = [res.local_logits.data.argmax(axis=1),
                   res.global_logits.data.argmax(axis=1)]
        if branch_preds is None:
            branch_preds = [[] for _ in per]
        for chunk_list, arr in zip(branch_preds, per):
            chunk_list.append(arr)
    predictions = np.concatenate(preds)
    labels = dataset.labels
    per_class: list[float | None] = []
    for k in range(dataset.class_count):
        mask = labels == k
        per_class.append(float((predictions[mask] == k).mean()) if mask.any() else None)
    per_branch = [accuracy(np.concatenate(chunks), labels) for chunks in branch_preds]
    return EvalReport(accuracy=accuracy(predictions, labels),
                      per_class=per_class, per_branch=per_branch)


def train(model, train_set, test_set, config, probe_images=None) -> TrainResult:
    """Run the full loop; returns per-epoch records and branch-add checks.

    Identical (model, datasets, config) inputs give identical records and
    final weights: shuffling and initialization draw from seed-derived
    streams only.
    """
    is_ensemble = isinstance(model, EnsembleModel)
    opt = SGD(config.learning_rate, config.momentum)
    if probe_images is None and len(train_set) > 0:
        probe_images = train_set.images[:min(8, len(train_set))]
    records, add_checks = [], []
    for epoch in range(config.epochs):
        if (is_ensemble and epoch > 0 and epoch % config.branch_add_epochs == 0
                and len(model.branches) < model.branch_max):
            add_checks.append(_checked_add(model, probe_images, epoch))
        sums = {"total": [], "cls": [], "d_sp": [], "d_ch": [], "d_b": []}
        shuffle_seed = np.random.SeedSequence([config.seed, 17, epoch])
        for b_idx, (xb, yb) in enumerate(batches(train_set, config.batch_size,
                                                 shuffle_seed=shuffle_seed)):
            if is_ensemble:
                loss, bd = _ensemble_step(model, xb, yb, config)
            else:
                loss, bd = _dual_step(model, xb, yb, config)
            if not bd.finite():
                raise NonFiniteLossError(epoch, b_idx, bd)
            sums["total"].append(bd.total)
            sums["cls"].append(bd.classification)
            sums["d_sp"].append(bd.d_sp)
            sums["d_ch"].append(bd.d_ch)
            sums["d_b"].append(bd.d_branch)
            opt.zero_grad(model.parameters())
            backward(loss)
            opt.step(model.parameters())
        records.append(EpochRecord(
            epoch=epoch + 1,
            branch_count=len(model.branches) if is_ensemble else 2,
            train_acc=accuracy(predict_dataset(model, train_set, config.batch_size),
                               train_set.labels),
            test_acc=accuracy(predict_dataset(model, test_set, config.batch_size),
                              test_set.labels),
            loss_total=float(np.mean(sums["total"])),
            loss_cls=float(np.mean(sums["cls"])),
            d_sp=_mean_or_none(sums["d_sp"]),
            d_ch=_mean_or_none(sums["d_ch"]),
            d_branch=_mean_or_none(sums["d_b"]),
        ))
    return TrainResult(records=records, add_checks=add_checks)
