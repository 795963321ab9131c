"""Named finite-difference verification suite behind `divreg gradcheck`.

Every tape op and the full loss compositions are checked against central
differences: ops at 1e-5, composite losses through tiny end-to-end
models at 1e-4. Check inputs come from per-check seeded streams, chosen
with margins away from relu/max kinks, so the report is deterministic.

The `corrupt` hook perturbs the named check's computed gradient before
comparison; it exists so the failure path (exit 4) can be exercised on
purpose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, concat, exp, grad_check, matmul, neg, relu, reshape,
                       sigmoid, tmean, tsum)
from .diversity import (SimilarityConfig, channel_pool, det_gradient, det_t,
                        diversity_from_features, diversity_of_pooled,
                        similarity_matrix_t, spatial_pool, unit_normalize)
from .models import build_dual_branch, build_ensemble
from .nn import (AttentionBlock, ConvLayer, DenseLayer, attention_apply, broadcast_mul,
                 conv2d, global_avg_pool, linear, reduce_max, softmax_cross_entropy)
from .training import combined_loss, esr_loss, manet_loss

OP_TOL = 1e-5
COMPOSITE_TOL = 1e-4
_SUITE_SALT = 0x6A11


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    threshold: float
    passed: bool


def _rng(index: int):
    return np.random.default_rng(np.random.SeedSequence([_SUITE_SALT, index]))


def _var(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _mix(t: Tensor, rng) -> Tensor:
    """Reduce to a scalar with fixed random weights so every output
    position contributes to the checked gradient."""
    r = Tensor(rng.uniform(0.5, 1.5, t.data.shape) * rng.choice([-1.0, 1.0], t.data.shape))
    return tsum(t * r)


def _away_from_zero(rng, shape, low=0.2, high=1.0):
    return rng.uniform(low, high, shape) * rng.choice([-1.0, 1.0], shape)


def _max_over(*errs: float) -> float:
    return float(max(errs))


# --- core tape ops ---------------------------------------------------------

def _check_add(rng):
    a = _var(rng.normal(size=(3, 4)))
    b = _var(rng.normal(size=(3, 4)))
    s = _var(rng.normal())
    return _max_over(
        grad_check(lambda t: _mix(t + b, _rng(101)), a),
        grad_check(lambda t: _mix(a + t, _rng(102)), b),
        grad_check(lambda t: _mix(a + t, _rng(103)), s))


def _check_mul(rng):
    a = _var(rng.normal(size=(3, 4)))
    b = _var(rng.normal(size=(3, 4)))
    s = _var(rng.normal())
    return _max_over(
        grad_check(lambda t: _mix(t * b, _rng(104)), a),
        grad_check(lambda t: _mix(a * t, _rng(105)), b),
        grad_check(lambda t: _mix(a * t, _rng(106)), s))


def _check_neg(rng):
    a = _var(rng.normal(size=(2, 5)))
    return grad_check(lambda t: _mix(neg(t), _rng(107)), a)


def _check_exp(rng):
    a = _var(rng.uniform(-1.0, 1.0, (3, 3)))
    return grad_check(lambda t: _mix(exp(t), _rng(108)), a)


def _check_relu(rng):
    a = _var(_away_from_zero(rng, (4, 4)))
    return grad_check(lambda t: _mix(relu(t), _rng(109)), a)


def _check_sigmoid(rng):
    a = _var(rng.uniform(-3.0, 3.0, (3, 4)))
    return grad_check(lambda t: _mix(sigmoid(t), _rng(110)), a)


def _check_sum(rng):
    a = _var(rng.normal(size=(3, 4, 2)))
    return _max_over(
        grad_check(lambda t: _mix(tsum(t, axis=1), _rng(111)), a),
        grad_check(lambda t: tsum(t), a),
        grad_check(lambda t: _mix(tsum(t, axis=(0, 2), keepdims=True), _rng(112)), a))


def _check_mean(rng):
    a = _var(rng.normal(size=(3, 4, 2)))
    return _max_over(
        grad_check(lambda t: _mix(tmean(t, axis=0), _rng(113)), a),
        grad_check(lambda t: tmean(t), a),
        grad_check(lambda t: _mix(tmean(t, axis=(1, 2), keepdims=True), _rng(114)), a))


def _check_reshape(rng):
    a = _var(rng.normal(size=(3, 4)))
    return grad_check(lambda t: _mix(reshape(t, (2, 6)), _rng(115)), a)


def _check_concat(rng):
    a = _var(rng.normal(size=(2, 3)))
    b = _var(rng.normal(size=(2, 2)))
    return _max_over(
        grad_check(lambda t: _mix(concat([t, b], axis=1), _rng(116)), a),
        grad_check(lambda t: _mix(concat([a, t], axis=1), _rng(117)), b))


def _check_slice(rng):
    a = _var(rng.normal(size=(4, 6)))
    return _max_over(
        grad_check(lambda t: _mix(t[1:3, ::2], _rng(118)), a),
        grad_check(lambda t: _mix(t[..., 2:], _rng(119)), a))


def _check_matmul(rng):
    a = _var(rng.normal(size=(3, 4)))
    b = _var(rng.normal(size=(4, 2)))
    return _max_over(
        grad_check(lambda t: _mix(matmul(t, b), _rng(120)), a),
        grad_check(lambda t: _mix(matmul(a, t), _rng(121)), b))


# --- nn ops ----------------------------------------------------------------

def _check_conv2d(rng):
    x = _var(rng.normal(size=(2, 2, 5, 5)))
    layer = ConvLayer(2, 3, 3, stride=1, padding=1, rng=rng)
    strided = ConvLayer(2, 2, 3, stride=2, padding=0, rng=rng)
    return _max_over(
        grad_check(lambda t: _mix(conv2d(t, layer), _rng(122)), x),
        grad_check(lambda t: _mix(conv2d(x, layer), _rng(123)), layer.weights),
        grad_check(lambda t: _mix(conv2d(x, layer), _rng(124)), layer.bias),
        grad_check(lambda t: _mix(conv2d(x, strided), _rng(125)), strided.weights))


def _check_linear(rng):
    x = _var(rng.normal(size=(3, 4)))
    layer = DenseLayer(4, 2, rng=rng)
    return _max_over(
        grad_check(lambda t: _mix(linear(t, layer), _rng(126)), x),
        grad_check(lambda t: _mix(linear(x, layer), _rng(127)), layer.weights),
        grad_check(lambda t: _mix(linear(x, layer), _rng(128)), layer.bias))


def _check_reduce_max(rng):
    # distinct multiples of 0.1 keep argmaxes unique with wide margins
    vals = rng.permutation(24).astype(np.float64).reshape(2, 3, 4) * 0.1
    a = _var(vals)
    return _max_over(
        grad_check(lambda t: _mix(reduce_max(t, axis=1), _rng(129)), a),
        grad_check(lambda t: _mix(reduce_max(t, axis=(1, 2), keepdims=True), _rng(130)), a))


def _check_broadcast_mul(rng):
    x = _var(rng.normal(size=(2, 3, 2, 2)))
    m_ch = _var(rng.normal(size=(2, 3, 1, 1)))
    m_sp = _var(rng.normal(size=(2, 1, 2, 2)))
    return _max_over(
        grad_check(lambda t: _mix(broadcast_mul(t, m_ch), _rng(131)), x),
        grad_check(lambda t: _mix(broadcast_mul(x, t), _rng(132)), m_ch),
        grad_check(lambda t: _mix(broadcast_mul(x, t), _rng(133)), m_sp))


def _check_softmax_cross_entropy(rng):
    logits = _var(rng.normal(size=(4, 5)))
    labels = np.array([1, 0, 4, 2])
    single = _var(rng.normal(size=5))
    return _max_over(
        grad_check(lambda t: softmax_cross_entropy(t, labels), logits),
        grad_check(lambda t: softmax_cross_entropy(t, 3), single))


def _check_global_avg_pool(rng):
    x = _var(rng.normal(size=(2, 3, 4, 4)))
    x3 = _var(rng.normal(size=(3, 4, 4)))
    return _max_over(
        grad_check(lambda t: _mix(global_avg_pool(t), _rng(134)), x),
        grad_check(lambda t: _mix(global_avg_pool(t), _rng(135)), x3))


def _check_attention(rng):
    x = _var(rng.normal(size=(2, 4, 4, 4)) + 0.5)
    block = AttentionBlock(4, reduction=4, spatial_kernel=3, rng=rng)

    def scalar(feature):
        refined, maps = attention_apply(feature, block)
        return (_mix(refined, _rng(136)) + _mix(maps.channel_map, _rng(137))
                + _mix(maps.spatial_map, _rng(138)))

    return _max_over(
        grad_check(lambda t: scalar(t), x),
        grad_check(lambda t: scalar(x), block.fc1.weights),
        grad_check(lambda t: scalar(x), block.fc2.weights),
        grad_check(lambda t: scalar(x), block.spatial_conv.weights),
        grad_check(lambda t: scalar(x), block.fc2.bias))


# --- diversity core --------------------------------------------------------

def _check_spatial_pool(rng):
    x = _var(rng.normal(size=(2, 3, 4, 4)))
    xm = _var(rng.permutation(2 * 3 * 16).astype(np.float64).reshape(2, 3, 4, 4) * 0.1)
    return _max_over(
        grad_check(lambda t: _mix(spatial_pool(t), _rng(139)), x),
        grad_check(lambda t: _mix(spatial_pool(t, op="max"), _rng(140)), xm))


def _check_channel_pool(rng):
    x = _var(rng.normal(size=(2, 3, 4, 4)))
    xm = _var(rng.permutation(2 * 3 * 16).astype(np.float64).reshape(2, 3, 4, 4) * 0.1)
    return _max_over(
        grad_check(lambda t: _mix(channel_pool(t), _rng(141)), x),
        grad_check(lambda t: _mix(channel_pool(t, op="max"), _rng(142)), xm))


def _check_unit_normalize(rng):
    x = _var(rng.normal(size=(3, 5)) + 0.8)
    return grad_check(lambda t: _mix(unit_normalize(t), _rng(143)), x)


def _check_similarity(rng):
    a = _var(rng.normal(size=(2, 3)))
    b = _var(rng.normal(size=(2, 3)))
    c = _var(rng.normal(size=(2, 3)))
    return _max_over(
        grad_check(lambda t: _mix(similarity_matrix_t([t, b, c], gamma=0.7), _rng(144)), a),
        grad_check(lambda t: _mix(similarity_matrix_t([a, t, c], gamma=0.7), _rng(145)), b),
        grad_check(lambda t: _mix(
            similarity_matrix_t([a, b, t], gamma=0.7, normalize=True), _rng(146)), c))


def _check_det(rng):
    x = _var(rng.normal(size=9))
    base = Tensor(np.eye(3) * 2.0)
    return grad_check(lambda t: det_t(reshape(t, (3, 3)) + base), x)


def _check_diversity_grad(rng, corrupt=False):
    """Cofactor-matrix gradient of lu_det vs finite differences of the
    independent numpy determinant."""
    worst = 0.0
    for trial in range(4):
        n = 3 + trial % 3
        a = rng.normal(size=(n, n)) + np.eye(n) * 1.5
        computed = det_gradient(a)
        if corrupt:
            computed = computed + 0.01
        fd = np.zeros_like(a)
        eps = 1e-6
        for i in range(n):
            for j in range(n):
                old = a[i, j]
                a[i, j] = old + eps
                fp = np.linalg.det(a)
                a[i, j] = old - eps
                fm = np.linalg.det(a)
                a[i, j] = old
                fd[i, j] = (fp - fm) / (2 * eps)
        denom = np.maximum(1e-6, np.maximum(np.abs(computed), np.abs(fd)))
        worst = max(worst, float((np.abs(computed - fd) / denom).max()))
    return worst


def _check_diversity_chain(rng):
    feats = [_var(rng.normal(size=(2, 2, 4, 4))) for _ in range(2)]
    cfg = SimilarityConfig(sample_count=2)

    def scalar(f0, f1):
        d_sp, d_ch = diversity_from_features([f0, f1], cfg)
        return d_sp.node + d_ch.node

    return _max_over(
        grad_check(lambda t: scalar(t, feats[1]), feats[0]),
        grad_check(lambda t: scalar(feats[0], t), feats[1]))


# --- composite losses ------------------------------------------------------

def _check_combined_loss(rng):
    x = np.clip(rng.normal(0.4, 0.25, (2, 1, 6, 6)), 0.0, 1.0)
    labels = np.array([0, 1])
    conv_a = ConvLayer(1, 2, 3, stride=1, padding=1, rng=rng)
    conv_b = ConvLayer(1, 2, 3, stride=1, padding=1, rng=rng)
    head = DenseLayer(2, 3, rng=rng)
    cfg = SimilarityConfig(sample_count=2)

    def scalar(_t):
        xt = Tensor(x)
        fa = relu(conv2d(xt, conv_a))
        fb = relu(conv2d(xt, conv_b))
        logits = linear(global_avg_pool(fa), head)
        cls = softmax_cross_entropy(logits, labels)
        d_sp, d_ch = diversity_from_features([fa, fb], cfg)
        total, _ = combined_loss(cls, d_ch, d_sp, 1.0)
        return total

    return _max_over(
        grad_check(scalar, conv_a.weights),
        grad_check(scalar, conv_b.weights),
        grad_check(scalar, head.weights),
        grad_check(scalar, conv_a.bias))


def _check_esr_loss(rng):
    model = build_ensemble(class_count=3, branch_max=2, attention_enabled=True,
                           seed=7, input_size=8, initial_branches=2)
    x = np.clip(rng.normal(0.4, 0.25, (2, 1, 8, 8)), 0.0, 1.0)
    labels = np.array([0, 2])

    def scalar(_t):
        logits, maps_all = model.forward(Tensor(x))
        losses = [softmax_cross_entropy(lg, labels) for lg in logits]
        sp = diversity_of_pooled([m[-1].spatial_map for m in maps_all], "spatial")
        ch = diversity_of_pooled([m[-1].channel_map for m in maps_all], "channel")
        total, _ = esr_loss(losses, ch, sp, 1.0)
        return total

    branch = model.branches[0]
    return _max_over(
        grad_check(scalar, model.base.conv1.weights),
        grad_check(scalar, branch.conv1.bias),
        grad_check(scalar, branch.attn2.fc1.weights),
        grad_check(scalar, branch.attn2.spatial_conv.weights),
        grad_check(scalar, branch.head.weights))


def _check_manet_loss(rng):
    model = build_dual_branch(class_count=3, attention_enabled=True, seed=11,
                              input_size=8, lambda_balance=0.6)
    x = np.clip(rng.normal(0.4, 0.25, (2, 1, 8, 8)), 0.0, 1.0)
    labels = np.array([1, 2])

    def scalar(_t):
        res = model.forward(Tensor(x))
        l_local = softmax_cross_entropy(res.local_logits, labels)
        l_global = softmax_cross_entropy(res.global_logits, labels)
        sp = diversity_of_pooled([spatial_pool(f) for f in res.patch_features], "spatial")
        ch = diversity_of_pooled([channel_pool(f) for f in res.patch_features], "channel")
        db = diversity_of_pooled(list(res.branch_pooled), "branch")
        total, _ = manet_loss(l_local, l_global, db, sp, ch, 0.6, 1.0)
        return total

    return _max_over(
        grad_check(scalar, model.backbone.conv1.weights),
        grad_check(scalar, model.global_conv.bias),
        grad_check(scalar, model.local_convs[2].bias),
        grad_check(scalar, model.local_head.weights),
        grad_check(scalar, model.global_head.bias))


_CHECKS = [
    ("add", OP_TOL, _check_add),
    ("mul", OP_TOL, _check_mul),
    ("neg", OP_TOL, _check_neg),
    ("exp", OP_TOL, _check_exp),
    ("relu", OP_TOL, _check_relu),
    ("sigmoid", OP_TOL, _check_sigmoid),
    ("sum", OP_TOL, _check_sum),
    ("mean", OP_TOL, _check_mean),
    ("reshape", OP_TOL, _check_reshape),
    ("concat", OP_TOL, _check_concat),
    ("slice", OP_TOL, _check_slice),
    ("matmul", OP_TOL, _check_matmul),
    ("conv2d", OP_TOL, _check_conv2d),
    ("linear", OP_TOL, _check_linear),
    ("reduce_max", OP_TOL, _check_reduce_max),
    ("broadcast_mul", OP_TOL, _check_broadcast_mul),
    ("softmax_cross_entropy", OP_TOL, _check_softmax_cross_entropy),
    ("global_avg_pool", OP_TOL, _check_global_avg_pool),
    ("attention", OP_TOL, _check_attention),
    ("spatial_pool", OP_TOL, _check_spatial_pool),
    ("channel_pool", OP_TOL, _check_channel_pool),
    ("unit_normalize", OP_TOL, _check_unit_normalize),
    ("similarity", OP_TOL, _check_similarity),
    ("det", OP_TOL, _check_det),
    ("diversity_grad", OP_TOL, _check_diversity_grad),
    ("diversity_chain", OP_TOL, _check_diversity_chain),
    ("combined_loss", COMPOSITE_TOL, _check_combined_loss),
    ("esr_loss", COMPOSITE_TOL, _check_esr_loss),
    ("manet_loss", COMPOSITE_TOL, _check_manet_loss),
]


def run_suite(corrupt: str | None = None) -> list[CheckResult]:
    """Run every check with its own seeded stream; `corrupt` names one
    check whose computed gradient is deliberately perturbed."""
    results = []
    for index, (name, threshold, fn) in enumerate(_CHECKS):
        rng = _rng(index)
        if name == "diversity_grad":
            err = fn(rng, corrupt=(corrupt == name))
        else:
            err = fn(rng)
            if corrupt == name:
                err = err + 1.0
        results.append(CheckResult(name=name, max_rel_err=float(err),
                                   threshold=threshold, passed=err < threshold))
    return results


def report_text(results) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.name:<24s} max_rel_err={r.max_rel_err:.3e} "
                     f"(threshold {r.threshold:.0e})")
    failing = [r.name for r in results if not r.passed]
    lines.append("all checks passed" if not failing
                 else "failing: " + ", ".join(failing))
    return "\n".join(lines) + "\n"


def report_json(results) -> dict:
    return {
        "checks": [{"name": r.name, "max_rel_err": r.max_rel_err,
                    "threshold": r.threshold, "passed": r.passed}
                   for r in results],
        "all_passed": all(r.passed for r in results),
    }
