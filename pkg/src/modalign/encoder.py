"""Desk-scale dual-branch token encoder with exact reverse-mode gradients.

Each branch maps per-sample token matrices through two affine + ReLU
layers and condenses them with GeM pooling (learnable exponent); branch
weights are shared across modalities. Fusion heads turn the branch
features into per-modality, cross-modality, and hierarchical embeddings;
a linear classifier reads identity logits off the hierarchical embedding.
backward() replays the cached forward exactly, so every parameter
gradient (including the GeM exponents) matches finite differences.

Training utilities: SGD with momentum 0.9 and weight decay 5e-4, a staged
learning-rate schedule (linear warmup to a peak, two step-downs), and a
little-endian binary checkpoint format.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import Branch, FeatureBatch, Modality
from .errors import (
    CheckpointError,
    ContractViolationError,
    InvalidArgumentError,
    ShapeError,
)
from .fusion import AffineHead, BranchSet, cross_fuse, gem_pool, gem_pool_backward, hierarchical_concat, intra_fuse
from .rng import RngState, rng_normal


@dataclass
class BranchParams:
    """Two-layer token MLP plus GeM exponent (0-d array so SGD can update it)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    gem_p: np.ndarray

    def __post_init__(self):
        self.gem_p = np.asarray(self.gem_p, dtype=np.float64).reshape(())


@dataclass
class EncoderParams:
    global_branch: BranchParams
    part_branch: BranchParams | None
    intra_head: AffineHead
    cross_head: AffineHead
    hier_head: AffineHead
    classifier: AffineHead

    def tensors(self) -> dict:
        """Live name -> array views covering every trainable tensor."""
        out = {}
        branches = [("global", self.global_branch)]
        if self.part_branch is not None:
            branches.append(("part", self.part_branch))
        for name, bp in branches:
            out[f"{name}.w1"] = bp.w1
            out[f"{name}.b1"] = bp.b1
            out[f"{name}.w2"] = bp.w2
            out[f"{name}.b2"] = bp.b2
            out[f"{name}.gem_p"] = bp.gem_p
        for name, head in (("intra_head", self.intra_head), ("cross_head", self.cross_head),
                           ("hier_head", self.hier_head), ("classifier", self.classifier)):
            out[f"{name}.w"] = head.weight
            out[f"{name}.b"] = head.bias
        return out


def init_encoder_params(token_dim: int, hidden: int, feature_dim: int, embed_dim: int,
                        num_classes: int, use_part: bool, rng: RngState) -> EncoderParams:
    """He-style initialization; biases zero, GeM exponents 3."""
    def dense(rows, cols, scale):
        return rng_normal(rng, rows * cols).reshape(rows, cols) * scale

    def branch():
        return BranchParams(
            w1=dense(token_dim, hidden, math.sqrt(2.0 / token_dim)),
            b1=np.zeros(hidden),
            w2=dense(hidden, feature_dim, math.sqrt(2.0 / hidden)),
            b2=np.zeros(feature_dim),
            gem_p=np.float64(3.0),
        )

    def head(din, dout):
        return AffineHead(dense(din, dout, math.sqrt(1.0 / din)), np.zeros(dout))

    g = branch()
    p = branch() if use_part else None
    d_p = feature_dim if use_part else 0
    return EncoderParams(
        global_branch=g,
        part_branch=p,
        intra_head=head(feature_dim + d_p, embed_dim),
        cross_head=head(feature_dim + d_p, embed_dim),
        hier_head=head(2 * (feature_dim + d_p), embed_dim),
        classifier=head(embed_dim, num_classes),
    )


@dataclass
class TokenBatch:
    """Identity-aligned token stacks (n, L, token_dim) for both modalities.

    Part stacks may be None when the encoder has no part branch; their
    token count may differ from the global one.
    """

    g_rgb: np.ndarray
    g_ir: np.ndarray
    p_rgb: np.ndarray | None
    p_ir: np.ndarray | None
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for name in ("g_rgb", "g_ir", "p_rgb", "p_ir"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 3:
                raise ShapeError(f"{name} must be (n, L, d), got shape {arr.shape}")
            if arr.shape[0] != self.labels.shape[0]:
                raise ShapeError(f"{name} rows {arr.shape[0]} vs {self.labels.shape[0]} labels")
            setattr(self, name, arr)

    @property
    def n(self) -> int:
        return self.labels.shape[0]


@dataclass
class ForwardCache:
    params: EncoderParams
    branch: dict
    intra_cat: dict
    cross_cat: dict
    hier_cat: np.ndarray
    hier_pre: np.ndarray
    hier_emb: np.ndarray
    logits: np.ndarray


@dataclass
class ForwardOutputs:
    feat_g_rgb: np.ndarray
    feat_p_rgb: np.ndarray
    feat_g_ir: np.ndarray
    feat_p_ir: np.ndarray
    emb_rgb: np.ndarray
    emb_ir: np.ndarray
    cross_rgb_ir: np.ndarray
    cross_ir_rgb: np.ndarray
    hier_emb: np.ndarray
    logits: np.ndarray
    cache: ForwardCache


def _branch_forward(bp: BranchParams, tokens: np.ndarray):
    z1 = tokens @ bp.w1 + bp.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ bp.w2 + bp.b2
    a2 = np.maximum(z2, 0.0)
    feat = gem_pool(a2, float(bp.gem_p))
    return feat, {"tokens": tokens, "z1": z1, "a1": a1, "z2": z2, "a2": a2}


def forward(params: EncoderParams, batch: TokenBatch) -> ForwardOutputs:
    """Full forward pass; the returned cache feeds backward()."""
    n = batch.n
    has_part = params.part_branch is not None
    branch_cache = {}
    feats = {}
    for mod, tokens in (("rgb", batch.g_rgb), ("ir", batch.g_ir)):
        feats[("global", mod)], branch_cache[("global", mod)] = _branch_forward(
            params.global_branch, tokens)
    if has_part:
        if batch.p_rgb is None or batch.p_ir is None:
            raise ShapeError("encoder has a part branch but the batch lacks part tokens")
        for mod, tokens in (("rgb", batch.p_rgb), ("ir", batch.p_ir)):
            feats[("part", mod)], branch_cache[("part", mod)] = _branch_forward(
                params.part_branch, tokens)
    else:
        feats[("part", "rgb")] = np.zeros((n, 0))
        feats[("part", "ir")] = np.zeros((n, 0))

    bs = BranchSet(
        g_rgb=FeatureBatch(feats[("global", "rgb")], batch.labels, Modality.RGB, Branch.GLOBAL),
        g_ir=FeatureBatch(feats[("global", "ir")], batch.labels, Modality.IR, Branch.GLOBAL),
        p_rgb=FeatureBatch(feats[("part", "rgb")], batch.labels, Modality.RGB, Branch.PART),
        p_ir=FeatureBatch(feats[("part", "ir")], batch.labels, Modality.IR, Branch.PART),
    )
    intra_rgb, intra_ir = intra_fuse(bs)
    cross_ri, cross_ir = cross_fuse(bs)
    hier_cat = hierarchical_concat(bs).features

    intra_cat = {"rgb": intra_rgb.features, "ir": intra_ir.features}
    cross_cat = {"rgb_ir": cross_ri.features, "ir_rgb": cross_ir.features}
    emb_rgb = params.intra_head.apply(intra_cat["rgb"])
    emb_ir = params.intra_head.apply(intra_cat["ir"])
    x_rgb_ir = params.cross_head.apply(cross_cat["rgb_ir"])
    x_ir_rgb = params.cross_head.apply(cross_cat["ir_rgb"])
    hier_pre = params.hier_head.apply(hier_cat)
    hier_emb = np.maximum(hier_pre, 0.0)
    logits = params.classifier.apply(hier_emb)

    cache = ForwardCache(
        params=params,
        branch=branch_cache,
        intra_cat=intra_cat,
        cross_cat=cross_cat,
        hier_cat=hier_cat,
        hier_pre=hier_pre,
        hier_emb=hier_emb,
        logits=logits,
    )
    return ForwardOutputs(
        feat_g_rgb=feats[("global", "rgb")],
        feat_p_rgb=feats[("part", "rgb")],
        feat_g_ir=feats[("global", "ir")],
        feat_p_ir=feats[("part", "ir")],
        emb_rgb=emb_rgb,
        emb_ir=emb_ir,
        cross_rgb_ir=x_rgb_ir,
        cross_ir_rgb=x_ir_rgb,
        hier_emb=hier_emb,
        logits=logits,
        cache=cache,
    )


def _branch_backward(bp: BranchParams, cache: dict, d_feat: np.ndarray, grads: dict, prefix: str):
    d_a2, d_p = gem_pool_backward(cache["a2"], float(bp.gem_p), d_feat)
    d_z2 = d_a2 * (cache["z2"] > 0.0)
    a1_flat = cache["a1"].reshape(-1, cache["a1"].shape[-1])
    d_z2_flat = d_z2.reshape(-1, d_z2.shape[-1])
    grads[f"{prefix}.w2"] += a1_flat.T @ d_z2_flat
    grads[f"{prefix}.b2"] += d_z2_flat.sum(axis=0)
    d_a1 = d_z2 @ bp.w2.T
    d_z1 = d_a1 * (cache["z1"] > 0.0)
    tok_flat = cache["tokens"].reshape(-1, cache["tokens"].shape[-1])
    d_z1_flat = d_z1.reshape(-1, d_z1.shape[-1])
    grads[f"{prefix}.w1"] += tok_flat.T @ d_z1_flat
    grads[f"{prefix}.b1"] += d_z1_flat.sum(axis=0)
    grads[f"{prefix}.gem_p"] += d_p


_GRAD_KEYS = ("logits", "emb_rgb", "emb_ir", "cross_rgb_ir", "cross_ir_rgb",
              "feat_g_rgb", "feat_p_rgb", "feat_g_ir", "feat_p_ir")


def backward(cache: ForwardCache, loss_grads: dict) -> dict:
    """Parameter gradients of the objective whose input gradients are given.

    loss_grads must carry every key produced by the loss module with
    shapes matching the cached forward; anything else means the cache is
    stale for these gradients.
    """
    params = cache.params
    for key in _GRAD_KEYS:
        if key not in loss_grads:
            raise ContractViolationError(f"missing loss gradient {key!r}")
    if loss_grads["logits"].shape != cache.logits.shape:
        raise ContractViolationError(
            f"logit gradient shape {loss_grads['logits'].shape} does not match "
            f"cached forward {cache.logits.shape}")

    grads = {name: np.zeros_like(arr) for name, arr in params.tensors().items()}
    d_f = feature_dim = params.global_branch.w2.shape[1]
    has_part = params.part_branch is not None
    d_p = feature_dim if has_part else 0

    # classifier and hierarchical head
    d_logits = loss_grads["logits"]
    grads["classifier.w"] += cache.hier_emb.T @ d_logits
    grads["classifier.b"] += d_logits.sum(axis=0)
    d_hier_emb = d_logits @ params.classifier.weight.T
    d_hier_pre = d_hier_emb * (cache.hier_pre > 0.0)
    grads["hier_head.w"] += cache.hier_cat.T @ d_hier_pre
    grads["hier_head.b"] += d_hier_pre.sum(axis=0)
    d_hier_cat = d_hier_pre @ params.hier_head.weight.T

    d_feat = {
        ("global", "rgb"): loss_grads["feat_g_rgb"].copy(),
        ("global", "ir"): loss_grads["feat_g_ir"].copy(),
        ("part", "rgb"): loss_grads["feat_p_rgb"].copy(),
        ("part", "ir"): loss_grads["feat_p_ir"].copy(),
    }
    # hier concat order: [g_rgb | g_ir | p_rgb | p_ir]
    d_feat[("global", "rgb")] += d_hier_cat[:, :d_f]
    d_feat[("global", "ir")] += d_hier_cat[:, d_f : 2 * d_f]
    d_feat[("part", "rgb")] += d_hier_cat[:, 2 * d_f : 2 * d_f + d_p]
    d_feat[("part", "ir")] += d_hier_cat[:, 2 * d_f + d_p :]

    # intra head on [g | p] per modality
    for mod, key in (("rgb", "emb_rgb"), ("ir", "emb_ir")):
        d_emb = loss_grads[key]
        grads["intra_head.w"] += cache.intra_cat[mod].T @ d_emb
        grads["intra_head.b"] += d_emb.sum(axis=0)
        d_cat = d_emb @ params.intra_head.weight.T
        d_feat[("global", mod)] += d_cat[:, :d_f]
        d_feat[("part", mod)] += d_cat[:, d_f:]

    # cross head on [g_rgb | p_ir] and [g_ir | p_rgb]
    for cat_key, key, g_mod, p_mod in (("rgb_ir", "cross_rgb_ir", "rgb", "ir"),
                                       ("ir_rgb", "cross_ir_rgb", "ir", "rgb")):
        d_emb = loss_grads[key]
        grads["cross_head.w"] += cache.cross_cat[cat_key].T @ d_emb
        grads["cross_head.b"] += d_emb.sum(axis=0)
        d_cat = d_emb @ params.cross_head.weight.T
        d_feat[("global", g_mod)] += d_cat[:, :d_f]
        d_feat[("part", p_mod)] += d_cat[:, d_f:]

    for mod in ("rgb", "ir"):
        _branch_backward(params.global_branch, cache.branch[("global", mod)],
                         d_feat[("global", mod)], grads, "global")
        if has_part:
            _branch_backward(params.part_branch, cache.branch[("part", mod)],
                             d_feat[("part", mod)], grads, "part")
    return grads


# --- optimizer ----------------------------------------------------------------

@dataclass
class OptimizerState:
    """Momentum buffers keyed like the parameter tensors."""

    velocities: dict
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epoch: int = 0

    @staticmethod
    def for_tensors(tensors: dict, momentum: float = 0.9, weight_decay: float = 5e-4):
        return OptimizerState(
            velocities={k: np.zeros_like(v) for k, v in tensors.items()},
            momentum=momentum,
            weight_decay=weight_decay,
        )


def sgd_step(tensors: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """In-place v <- m v + g + wd p; p <- p - lr v."""
    for name, param in tensors.items():
        g = grads[name]
        v = state.velocities[name]
        if v.shape != param.shape or np.shape(g) != param.shape:
            raise ShapeError(f"tensor {name}: param {param.shape}, grad {np.shape(g)}, "
                             f"velocity {v.shape}")
        v *= state.momentum
        v += g + state.weight_decay * param
        param -= lr * v


def staged_lr(epoch: int, total_epochs: int,
              start: float = 0.01, peak: float = 0.1, mid: float = 0.01, final: float = 0.001,
              warm_frac: float = 0.125, hold_frac: float = 0.5, decay_frac: float = 0.75) -> float:
    """Warm up linearly start -> peak over the first warm_frac of the run,
    hold the peak until hold_frac, drop to mid until decay_frac, then final."""
    if not (0 <= epoch < total_epochs):
        raise InvalidArgumentError(f"epoch {epoch} outside [0, {total_epochs})")
    warm = max(1, math.floor(warm_frac * total_epochs))
    hold_end = max(warm, math.floor(hold_frac * total_epochs))
    decay_end = max(hold_end, math.floor(decay_frac * total_epochs))
    if epoch < warm:
        return start + (peak - start) * (epoch / warm)
    if epoch < hold_end:
        return peak
    if epoch < decay_end:
        return mid
    return final


# --- checkpoints ----------------------------------------------------------------

_CKPT_MAGIC = b"MODALIGN"
_CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict) -> None:
    """Little-endian binary: magic, u16 version, u32 count, per-tensor name
    and shape table, then raw float64 payloads in table order."""
    blob = [_CKPT_MAGIC, struct.pack("<HI", _CKPT_VERSION, len(tensors))]
    payload = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        blob.append(struct.pack("<H", len(encoded)))
        blob.append(encoded)
        blob.append(struct.pack("<B", arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        payload.append(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob) + b"".join(payload))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    off = len(_CKPT_MAGIC)
    version, count = struct.unpack_from("<HI", data, off)
    off += 6
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off) if ndim else ()
        off += 4 * ndim
        entries.append((name, shape))
    tensors = {}
    for name, shape in entries:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        tensors[name] = arr.copy()
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return tensors


def load_tensors_into(tensors: dict, loaded: dict) -> None:
    """Copy checkpoint values into live tensors; layouts must match exactly."""
    if set(tensors) != set(loaded):
        missing = set(tensors) ^ set(loaded)
        raise CheckpointError(f"checkpoint tensor names do not match the model: {sorted(missing)}")
    for name, arr in tensors.items():
        if loaded[name].shape != arr.shape:
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {loaded[name].shape} vs model {arr.shape}")
        arr[...] = loaded[name]
