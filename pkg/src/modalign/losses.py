"""Composite training objective: identity, batch-hard triplet, alignment.

total = L_id + lambda_tri * L_triplet + w_intra * L_intra + w_inter * L_inter

L_intra aligns the global and part feature distributions within each
modality; L_inter aligns the fused RGB and fused IR embedding
distributions. Both are squared multi-kernel MMD values. Every component
returns exact analytic gradients so the whole objective can be checked
against finite differences.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, SamplingError, ShapeError
from .mmd import KernelSettings, mmd2_grad, pairwise_sq_dists


@dataclass
class LossWeights:
    """Term weights; the intra/inter pair mirrors the alignment sweep axis."""

    w_intra: float = 0.4
    w_inter: float = 0.6
    lambda_tri: float = 1.0
    margin: float = 0.3

    def __post_init__(self):
        for name in ("w_intra", "w_inter", "lambda_tri", "margin"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise InvalidArgumentError(f"{name} must be finite and >= 0, got {v!r}")


@dataclass
class LossReport:
    """Component values plus gradient buffers of the weighted total."""

    total: float
    id_loss: float
    triplet_loss: float
    intra_align_loss: float
    inter_align_loss: float
    grads: dict = field(default_factory=dict)


def id_loss(logits, labels):
    """Mean cross entropy of softmax(logits) against integer labels.

    Returns (value, d_logits) with d_logits = (softmax - onehot) / n.
    Shift-stable: the row maximum is subtracted before exponentiation.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise InvalidArgumentError(f"labels must lie in [0, {c}), got range "
                                   f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    value = float(np.mean(lse - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    return value, probs / n


def triplet_loss_hard(emb, labels, margin: float):
    """Batch-hard triplet loss with Euclidean distances.

    Per anchor the farthest positive and nearest negative are mined (ties
    broken toward the lowest sample index) and hinged at the margin.
    Returns (value, d_emb). Every anchor must have at least one positive
    (another sample of its identity) and one negative in the batch.
    """
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if emb.ndim != 2 or labels.shape != (emb.shape[0],):
        raise ShapeError(f"embeddings {emb.shape} vs labels {labels.shape}")
    if not (math.isfinite(margin) and margin >= 0):
        raise InvalidArgumentError(f"margin must be finite and >= 0, got {margin!r}")
    n = emb.shape[0]
    dist = np.sqrt(pairwise_sq_dists(emb))
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same

    d_emb = np.zeros_like(emb)
    total = 0.0
    for a in range(n):
        if not pos_mask[a].any():
            raise SamplingError(f"anchor {a} (label {labels[a]}) has no positive in the batch")
        if not neg_mask[a].any():
            raise SamplingError(f"anchor {a} (label {labels[a]}) has no negative in the batch")
        p = int(np.argmax(np.where(pos_mask[a], dist[a], -np.inf)))
        q = int(np.argmin(np.where(neg_mask[a], dist[a], np.inf)))
        hinge = dist[a, p] - dist[a, q] + margin
        if hinge <= 0.0:
            continue
        total += hinge
        if dist[a, p] > 0.0:
            g = (emb[a] - emb[p]) / dist[a, p]
            d_emb[a] += g
            d_emb[p] -= g
        if dist[a, q] > 0.0:
            g = (emb[a] - emb[q]) / dist[a, q]
            d_emb[a] -= g
            d_emb[q] += g
    return total / n, d_emb / n


def alignment_losses(feat_g_rgb, feat_p_rgb, feat_g_ir, feat_p_ir,
                     fused_rgb, fused_ir, kernel: KernelSettings):
    """Distribution-alignment MMD terms and their input gradients.

    intra = mmd2(global_rgb, part_rgb) + mmd2(global_ir, part_ir)
    inter = mmd2(fused_rgb, fused_ir)

    Returns (intra, inter, grads) where grads maps each operand name to its
    gradient and 'dlogits_intra' / 'dlogits_inter' to the kernel-logit
    gradients of the two terms.
    """
    v_rgb, g_rgb = mmd2_grad(feat_g_rgb, feat_p_rgb, kernel.resolve(feat_g_rgb, feat_p_rgb))
    v_ir, g_ir = mmd2_grad(feat_g_ir, feat_p_ir, kernel.resolve(feat_g_ir, feat_p_ir))
    v_x, g_x = mmd2_grad(fused_rgb, fused_ir, kernel.resolve(fused_rgb, fused_ir))
    grads = {
        "feat_g_rgb": g_rgb.dx,
        "feat_p_rgb": g_rgb.dy,
        "feat_g_ir": g_ir.dx,
        "feat_p_ir": g_ir.dy,
        "fused_rgb": g_x.dx,
        "fused_ir": g_x.dy,
        "dlogits_intra": g_rgb.dlogits + g_ir.dlogits,
        "dlogits_inter": g_x.dlogits,
    }
    return v_rgb + v_ir, v_x, grads


def total_objective(logits, labels,
                    emb_rgb, emb_ir, cross_rgb_ir, cross_ir_rgb,
                    feat_g_rgb, feat_p_rgb, feat_g_ir, feat_p_ir,
                    weights: LossWeights, kernel: KernelSettings) -> LossReport:
    """Weighted objective over one paired batch.

    The identity term reads the classifier logits; the triplet term mines
    over all four fused embedding views stacked (per-modality and
    cross-modality), so every head receives metric supervision; the
    alignment terms follow alignment_losses. Gradient buffers in the
    report are gradients of the weighted total. Alignment terms with a
    zero weight are skipped entirely.
    """
    l_id, d_logits = id_loss(logits, labels)
    labels = np.asarray(labels, dtype=np.int64)

    zero = lambda a: np.zeros_like(np.asarray(a, dtype=np.float64))
    grads = {
        "logits": d_logits,
        "emb_rgb": zero(emb_rgb),
        "emb_ir": zero(emb_ir),
        "cross_rgb_ir": zero(cross_rgb_ir),
        "cross_ir_rgb": zero(cross_ir_rgb),
        "feat_g_rgb": zero(feat_g_rgb),
        "feat_p_rgb": zero(feat_p_rgb),
        "feat_g_ir": zero(feat_g_ir),
        "feat_p_ir": zero(feat_p_ir),
        "kernel_logits": np.zeros_like(kernel.logits),
    }

    l_tri = 0.0
    if weights.lambda_tri > 0:
        stack = np.concatenate([emb_rgb, emb_ir, cross_rgb_ir, cross_ir_rgb])
        l_tri, d_stack = triplet_loss_hard(stack, np.tile(labels, 4), weights.margin)
        n = labels.shape[0]
        for i, key in enumerate(("emb_rgb", "emb_ir", "cross_rgb_ir", "cross_ir_rgb")):
            grads[key] += weights.lambda_tri * d_stack[i * n : (i + 1) * n]

    l_intra = 0.0
    l_inter = 0.0
    if weights.w_intra > 0:
        v_rgb, g_rgb = mmd2_grad(feat_g_rgb, feat_p_rgb,
                                 kernel.resolve(feat_g_rgb, feat_p_rgb))
        v_ir, g_ir = mmd2_grad(feat_g_ir, feat_p_ir,
                               kernel.resolve(feat_g_ir, feat_p_ir))
        l_intra = v_rgb + v_ir
        grads["feat_g_rgb"] += weights.w_intra * g_rgb.dx
        grads["feat_p_rgb"] += weights.w_intra * g_rgb.dy
        grads["feat_g_ir"] += weights.w_intra * g_ir.dx
        grads["feat_p_ir"] += weights.w_intra * g_ir.dy
        grads["kernel_logits"] += weights.w_intra * (g_rgb.dlogits + g_ir.dlogits)
    if weights.w_inter > 0:
        l_inter, g_x = mmd2_grad(emb_rgb, emb_ir, kernel.resolve(emb_rgb, emb_ir))
        grads["emb_rgb"] += weights.w_inter * g_x.dx
        grads["emb_ir"] += weights.w_inter * g_x.dy
        grads["kernel_logits"] += weights.w_inter * g_x.dlogits

    total = (l_id + weights.lambda_tri * l_tri
             + weights.w_intra * l_intra + weights.w_inter * l_inter)
    return LossReport(
        total=total,
        id_loss=l_id,
        triplet_loss=l_tri,
        intra_align_loss=l_intra,
        inter_align_loss=l_inter,
        grads=grads,
    )
