"""Model families built on the tape: a width-growing attention ensemble
and a dual-branch (local patches + global map) network.

Both share a two-conv stride-2 base. Ensemble branches are
conv -> attention -> conv -> attention -> GAP -> dense and are added on a
schedule by the trainer; adding one never perturbs existing weights.
The dual-branch model splits the base map into four patches processed by
parallel conv stacks (local branch) next to a full-map stack (global
branch), with separate dense heads.

Checkpoints use a small binary format, magic "DVRG": a fixed header
(version, family, flags, branch counts, class count, input size,
parameter count, seed, lambda), a shape table, then flat float64
parameter data, all little-endian. Round trips are bit exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ShapeMismatch, Tensor, relu
from .nn import (AttentionBlock, AttentionMaps, ConvLayer, DenseLayer, attention_apply,
                 conv2d, global_avg_pool, linear)

CHECKPOINT_MAGIC = b"DVRG"
CHECKPOINT_VERSION = 1
FAMILY_ENSEMBLE = 0
FAMILY_DUAL = 1
_HEADER_FMT = "<4sIIIIIIIIQd"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)

BASE_CHANNELS = (8, 16)
BRANCH_CHANNELS = 32


class CapacityError(RuntimeError):
    """Raised when adding a branch past the configured maximum."""


class CheckpointFormatError(ValueError):
    """Raised for malformed, truncated, or mismatched checkpoint files."""


def softmax_probs(logits) -> np.ndarray:
    """Row-wise softmax of an (N,K) array or Tensor, numerically stable."""
    a = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _spatial_kernel(size: int) -> int:
    # attention's spatial conv wants k=7; small maps fall back to 3
    return 7 if size >= 7 else 3


class SharedBase:
    """Two stride-2 convs with relu; quarters the input resolution."""

    def __init__(self, in_channels: int, input_size: int, rng):
        c1, c2 = BASE_CHANNELS
        self.conv1 = ConvLayer(in_channels, c1, 3, stride=2, padding=1, rng=rng)
        self.conv2 = ConvLayer(c1, c2, 3, stride=2, padding=1, rng=rng)
        self.out_channels = c2
        s1, _ = self.conv1.out_size(input_size, input_size)
        self.out_size, _ = self.conv2.out_size(s1, s1)

    def forward(self, x: Tensor) -> Tensor:
        h = relu(conv2d(x, self.conv1))
        return relu(conv2d(h, self.conv2))

    def parameters(self) -> list[Tensor]:
        return self.conv1.parameters() + self.conv2.parameters()


class EnsembleBranch:
    """One classifier head: two conv stages, each optionally followed by
    attention, then GAP and a dense layer."""

    def __init__(self, branch_id: int, in_channels: int, in_size: int,
                 class_count: int, attention: bool, rng):
        self.branch_id = branch_id
        self.conv1 = ConvLayer(in_channels, BRANCH_CHANNELS, 3, stride=1, padding=1, rng=rng)
        size1 = in_size
        self.attn1 = (AttentionBlock(BRANCH_CHANNELS, reduction=4,
                                     spatial_kernel=_spatial_kernel(size1), rng=rng)
                      if attention else None)
        self.conv2 = ConvLayer(BRANCH_CHANNELS, BRANCH_CHANNELS, 3, stride=2, padding=1, rng=rng)
        size2, _ = self.conv2.out_size(size1, size1)
        self.attn2 = (AttentionBlock(BRANCH_CHANNELS, reduction=4,
                                     spatial_kernel=_spatial_kernel(size2), rng=rng)
                      if attention else None)
        self.head = DenseLayer(BRANCH_CHANNELS, class_count, rng=rng, gain="linear")

    def forward(self, x: Tensor) -> tuple[Tensor, list[AttentionMaps]]:
        maps = []
        h = x
        for conv, attn in ((self.conv1, self.attn1), (self.conv2, self.attn2)):
            h = relu(conv2d(h, conv))
            if attn is not None:
                h, m = attention_apply(h, attn)
                maps.append(m)
        logits = linear(global_avg_pool(h), self.head)
        return logits, maps

    def parameters(self) -> list[Tensor]:
        out = self.conv1.parameters()
        if self.attn1 is not None:
            out += self.attn1.parameters()
        out += self.conv2.parameters()
        if self.attn2 is not None:
            out += self.attn2.parameters()
        return out + self.head.parameters()


@dataclass
class EnsembleModel:
    base: SharedBase
    branches: list[EnsembleBranch]
    class_count: int
    branch_max: int
    attention_enabled: bool
    seed: int
    input_size: int

    def forward(self, batch: Tensor) -> tuple[list[Tensor], list[list[AttentionMaps]]]:
        shared = self.base.forward(batch)
        logits, maps = [], []
        for branch in self.branches:
            lg, mp = branch.forward(shared)
            logits.append(lg)
            maps.append(mp)
        return logits, maps

    def parameters(self) -> list[Tensor]:
        out = self.base.parameters()
        for branch in self.branches:
            out += branch.parameters()
        return out


def _branch_rng(seed: int, branch_id: int):
    return np.random.default_rng(np.random.SeedSequence([seed, 1, branch_id]))


def add_branch(model: EnsembleModel) -> EnsembleModel:
    """Append a freshly initialized branch; existing tensors untouched.

    Branch weights depend only on (model seed, branch index), so growth
    order cannot perturb earlier branches.
    """
    if len(model.branches) >= model.branch_max:
        raise CapacityError(
            f"cannot add branch: capacity {model.branch_max} already reached")
    idx = len(model.branches)
    branch = EnsembleBranch(idx, model.base.out_channels, model.base.out_size,
                            model.class_count, model.attention_enabled,
                            _branch_rng(model.seed, idx))
    model.branches.append(branch)
    return model


def build_ensemble(class_count: int, branch_max: int = 3, attention_enabled: bool = True,
                   seed: int = 0, input_size: int = 32,
                   initial_branches: int = 1) -> EnsembleModel:
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    if branch_max < 1:
        raise ValueError(f"branch_max must be >= 1, got {branch_max}")
    if not 1 <= initial_branches <= branch_max:
        raise ValueError(f"initial_branches must be in [1, {branch_max}], got {initial_branches}")
    if input_size < 4:
        raise ValueError(f"input_size must be >= 4, got {input_size}")
    base_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    base = SharedBase(1, input_size, base_rng)
    model = EnsembleModel(base=base, branches=[], class_count=class_count,
                          branch_max=branch_max, attention_enabled=attention_enabled,
                          seed=seed, input_size=input_size)
    for _ in range(initial_branches):
        add_branch(model)
    return model


def ensemble_forward(model: EnsembleModel, batch: Tensor):
    """Logits per branch plus each branch's last attention maps (None per
    branch when attention is off)."""
    logits, maps = model.forward(batch)
    last = [mp[-1] if mp else None for mp in maps]
    return logits, last


def ensemble_predict(logits_list) -> np.ndarray:
    """Majority vote over branch argmaxes; ties broken by the largest
    summed softmax over the tied classes, then by lowest class index."""
    if not logits_list:
        raise ValueError("need at least one branch's logits")
    probs = np.stack([softmax_probs(lg) for lg in logits_list])  # (B,N,K)
    votes = probs.argmax(axis=2)
    _, n, k = probs.shape
    summed = probs.sum(axis=0)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        counts = np.bincount(votes[:, i], minlength=k)
        tied = np.flatnonzero(counts == counts.max())
        if len(tied) == 1:
            out[i] = tied[0]
        else:
            # argmax returns the first maximum, i.e. the lowest class index
            out[i] = tied[int(np.argmax(summed[i, tied]))]
    return out


# ---------------------------------------------------------------------------
# dual branch

def patchify(feature: Tensor) -> list[Tensor]:
    """Split the trailing H×W plane into four equal quadrants, row-major:
    top-left, top-right, bottom-left, bottom-right."""
    d = feature.data
    if d.ndim < 2:
        raise ShapeMismatch("patchify", d.shape)
    h, w = d.shape[-2], d.shape[-1]
    if h % 2 or w % 2:
        raise ValueError(f"patchify needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    return [feature[..., :h2, :w2], feature[..., :h2, w2:],
            feature[..., h2:, :w2], feature[..., h2:, w2:]]


def unpatchify(patches) -> Tensor:
    """Inverse of patchify: reassemble four quadrants into one map."""
    tl, tr, bl, br = patches
    ndim = tl.data.ndim
    from .autodiff import concat
    top = concat([tl, tr], axis=ndim - 1)
    bottom = concat([bl, br], axis=ndim - 1)
    return concat([top, bottom], axis=ndim - 2)


@dataclass
class DualForward:
    global_logits: Tensor
    local_logits: Tensor
    patch_features: list[Tensor]
    branch_pooled: tuple[Tensor, Tensor]  # (local, global) GAP vectors
    global_attention: AttentionMaps | None = None
    local_attention: list[AttentionMaps] = field(default_factory=list)


class DualBranchModel:
    """Shared base, then a global conv stack on the full map and four
    parallel conv stacks on its quadrants, each optionally attended;
    separate dense heads score the two branch GAP vectors."""

    def __init__(self, class_count: int, attention_enabled: bool, seed: int,
                 input_size: int, lambda_balance: float):
        if class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {class_count}")
        if not 0.0 <= lambda_balance <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {lambda_balance}")
        if input_size < 8:
            raise ValueError(f"input_size must be >= 8, got {input_size}")
        self.class_count = class_count
        self.attention_enabled = attention_enabled
        self.seed = seed
        self.input_size = input_size
        self.lambda_balance = lambda_balance

        base_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        self.backbone = SharedBase(1, input_size, base_rng)
        size = self.backbone.out_size
        if size % 2:
            raise ValueError(f"backbone output {size}x{size} cannot be patchified")
        c = self.backbone.out_channels

        g_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.global_conv = ConvLayer(c, BRANCH_CHANNELS, 3, stride=1, padding=1, rng=g_rng)
        self.global_attn = (AttentionBlock(BRANCH_CHANNELS, reduction=4,
                                           spatial_kernel=_spatial_kernel(size), rng=g_rng)
                            if attention_enabled else None)

        self.local_convs: list[ConvLayer] = []
        self.local_attns: list[AttentionBlock | None] = []
        patch_size = size // 2
        for j in range(4):
            l_rng = np.random.default_rng(np.random.SeedSequence([seed, 2, j]))
            self.local_convs.append(
                ConvLayer(c, BRANCH_CHANNELS, 3, stride=1, padding=1, rng=l_rng))
            self.local_attns.append(
                AttentionBlock(BRANCH_CHANNELS, reduction=4,
                               spatial_kernel=_spatial_kernel(patch_size), rng=l_rng)
                if attention_enabled else None)

        h_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        self.local_head = DenseLayer(BRANCH_CHANNELS, class_count, rng=h_rng, gain="linear")
        self.global_head = DenseLayer(BRANCH_CHANNELS, class_count, rng=h_rng, gain="linear")

    def forward(self, batch: Tensor) -> DualForward:
        shared = self.backbone.forward(batch)

        g = relu(conv2d(shared, self.global_conv))
        g_maps = None
        if self.global_attn is not None:
            g, g_maps = attention_apply(g, self.global_attn)

        processed, local_maps = [], []
        for patch, conv, attn in zip(patchify(shared), self.local_convs, self.local_attns):
            h = relu(conv2d(patch, conv))
            if attn is not None:
                h, m = attention_apply(h, attn)
                local_maps.append(m)
            processed.append(h)
        local_map = unpatchify(processed)

        local_vec = global_avg_pool(local_map)
        global_vec = global_avg_pool(g)
        return DualForward(
            global_logits=linear(global_vec, self.global_head),
            local_logits=linear(local_vec, self.local_head),
            patch_features=processed,
            branch_pooled=(local_vec, global_vec),
            global_attention=g_maps,
            local_attention=local_maps,
        )

    def parameters(self) -> list[Tensor]:
        out = self.backbone.parameters() + self.global_conv.parameters()
        if self.global_attn is not None:
            out += self.global_attn.parameters()
        for conv, attn in zip(self.local_convs, self.local_attns):
            out += conv.parameters()
            if attn is not None:
                out += attn.parameters()
        return out + self.local_head.parameters() + self.global_head.parameters()


def build_dual_branch(class_count: int, attention_enabled: bool = True, seed: int = 0,
                      input_size: int = 32, lambda_balance: float = 0.6) -> DualBranchModel:
    return DualBranchModel(class_count, attention_enabled, seed, input_size, lambda_balance)


def dual_forward(model: DualBranchModel, batch: Tensor) -> DualForward:
    return model.forward(batch)


def dual_predict(global_logits, local_logits, lambda_balance: float) -> np.ndarray:
    """Argmax of the lambda-weighted mix of branch softmaxes."""
    mixed = (lambda_balance * softmax_probs(local_logits)
             + (1.0 - lambda_balance) * softmax_probs(global_logits))
    return mixed.argmax(axis=-1)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model, path) -> None:
    if isinstance(model, EnsembleModel):
        family, count, cap, lam = FAMILY_ENSEMBLE, len(model.branches), model.branch_max, 0.0
    elif isinstance(model, DualBranchModel):
        family, count, cap, lam = FAMILY_DUAL, 2, 2, model.lambda_balance
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    params = model.parameters()
    flags = 1 if model.attention_enabled else 0
    chunks = [struct.pack(_HEADER_FMT, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, family,
                          flags, count, cap, model.class_count, model.input_size,
                          len(params), model.seed, lam)]
    for p in params:
        chunks.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.data.shape))
    for p in params:
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER_SIZE:
        raise CheckpointFormatError(f"truncated checkpoint: {len(buf)} bytes is shorter than the header")
    (magic, version, family, flags, count, cap, class_count, input_size,
     param_count, seed, lam) = struct.unpack_from(_HEADER_FMT, buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if family not in (FAMILY_ENSEMBLE, FAMILY_DUAL):
        raise CheckpointFormatError(f"unknown model family tag {family}")
    if not 2 <= class_count <= 4096:
        raise CheckpointFormatError(f"implausible class count {class_count}")
    if not 4 <= input_size <= 4096:
        raise CheckpointFormatError(f"implausible input size {input_size}")
    if not 1 <= count <= cap <= 4096:
        raise CheckpointFormatError(f"implausible branch counts {count}/{cap}")
    attention = bool(flags & 1)

    if family == FAMILY_ENSEMBLE:
        model = build_ensemble(class_count, branch_max=cap, attention_enabled=attention,
                               seed=seed, input_size=input_size, initial_branches=count)
    else:
        model = build_dual_branch(class_count, attention_enabled=attention, seed=seed,
                                  input_size=input_size, lambda_balance=lam)
    params = model.parameters()
    if param_count != len(params):
        raise CheckpointFormatError(
            f"parameter count mismatch: file has {param_count}, model needs {len(params)}")

    offset = _HEADER_SIZE
    shapes = []
    for i in range(param_count):
        if offset + 4 > len(buf):
            raise CheckpointFormatError(f"truncated shape table at parameter {i}")
        (ndim,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if ndim > 8 or offset + 4 * ndim > len(buf):
            raise CheckpointFormatError(f"truncated shape table at parameter {i}")
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        shapes.append(shape)
    for i, (p, shape) in enumerate(zip(params, shapes)):
        if p.data.shape != shape:
            raise CheckpointFormatError(
                f"parameter {i} shape mismatch: file says {shape}, model says {p.data.shape}")
    for p in params:
        nbytes = p.data.size * 8
        if offset + nbytes > len(buf):
            raise CheckpointFormatError("truncated checkpoint: parameter data ends early")
        arr = np.frombuffer(buf, dtype="<f8", count=p.data.size, offset=offset)
        p.data = arr.astype(np.float64).reshape(p.data.shape)
        offset += nbytes
    if offset != len(buf):
        raise CheckpointFormatError(f"{len(buf) - offset} trailing bytes after parameter data")
    return model
