"""Feature fusion operators for the dual-branch, dual-modality pipeline.

Fusion is concatenation along the feature axis: within a modality the
global and part features are joined; across modalities the global features
of one modality are joined with the part features of the other; the
four-way hierarchical fusion concatenates everything and refines it with a
shared affine + ReLU head. Generalized-mean pooling condenses token
matrices into single vectors, interpolating between average (p = 1) and
max (p -> infinity) pooling.
"""

import math
from dataclasses import dataclass

import numpy as np

from .core import Branch, FeatureBatch, Modality, concat_rows_dimwise
from .errors import InvalidArgumentError, PairingError, ShapeError

GEM_FLOOR = 1e-6  # clamp before fractional powers; encoders feed ReLU outputs anyway


@dataclass
class AffineHead:
    """Dense map x @ weight + bias."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[1] != self.bias.shape[0]:
            raise ShapeError(
                f"weight {self.weight.shape} incompatible with bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"head expects width {self.in_dim}, got {x.shape[1]}")
        return x @ self.weight + self.bias


@dataclass
class BranchSet:
    """Row-aligned global/part features for both modalities."""

    g_rgb: FeatureBatch
    g_ir: FeatureBatch
    p_rgb: FeatureBatch
    p_ir: FeatureBatch

    def __post_init__(self):
        batches = (self.g_rgb, self.g_ir, self.p_rgb, self.p_ir)
        n = self.g_rgb.n
        if any(b.n != n for b in batches):
            raise ShapeError(f"row counts differ: {[b.n for b in batches]}")
        if self.g_rgb.dim != self.g_ir.dim:
            raise ShapeError("global widths differ between modalities")
        if self.p_rgb.dim != self.p_ir.dim:
            raise ShapeError("part widths differ between modalities")
        for b, mod in ((self.g_rgb, Modality.RGB), (self.g_ir, Modality.IR),
                       (self.p_rgb, Modality.RGB), (self.p_ir, Modality.IR)):
            if b.modality is not mod:
                raise ShapeError(f"batch tagged {b.modality} placed in a {mod} slot")
        if not np.array_equal(self.g_rgb.labels, self.p_rgb.labels):
            raise ShapeError("RGB global/part labels disagree")
        if not np.array_equal(self.g_ir.labels, self.p_ir.labels):
            raise ShapeError("IR global/part labels disagree")

    @property
    def n(self) -> int:
        return self.g_rgb.n

    @property
    def d_global(self) -> int:
        return self.g_rgb.dim

    @property
    def d_part(self) -> int:
        return self.p_rgb.dim


def intra_fuse(bs: BranchSet):
    """Per-modality global (+) part concatenation; labels and modality kept."""
    return concat_rows_dimwise(bs.g_rgb, bs.p_rgb), concat_rows_dimwise(bs.g_ir, bs.p_ir)


def cross_fuse(bs: BranchSet):
    """Global features of one modality joined with part features of the other.

    Requires the RGB and IR rows to carry the same identity per index;
    returns (rgb_global + ir_part, ir_global + rgb_part).
    """
    if not np.array_equal(bs.g_rgb.labels, bs.g_ir.labels):
        raise PairingError("RGB and IR rows are not identity-aligned")
    return concat_rows_dimwise(bs.g_rgb, bs.p_ir), concat_rows_dimwise(bs.g_ir, bs.p_rgb)


def hierarchical_concat(bs: BranchSet) -> FeatureBatch:
    """Four-way concatenation [g_rgb | g_ir | p_rgb | p_ir]."""
    return concat_rows_dimwise(concat_rows_dimwise(bs.g_rgb, bs.g_ir),
                               concat_rows_dimwise(bs.p_rgb, bs.p_ir))


def hierarchical_fuse(bs: BranchSet, shared_head: AffineHead) -> FeatureBatch:
    """Shared refinement of the four-way concatenation: ReLU(concat @ W + b)."""
    cat = hierarchical_concat(bs)
    expect = 2 * (bs.d_global + bs.d_part)
    if shared_head.in_dim != expect:
        raise ShapeError(f"shared head expects width {shared_head.in_dim}, concat has {expect}")
    refined = np.maximum(shared_head.apply(cat.features), 0.0)
    return FeatureBatch(refined, cat.labels, cat.modality, Branch.FUSED)


def gem_pool(tokens: np.ndarray, p: float) -> np.ndarray:
    """Generalized-mean pool over the token axis (second to last).

    An L x d matrix pools to a d-vector; a stack of shape (n, L, d) pools
    to (n, d). Entries are clamped below at GEM_FLOOR before powering,
    then out_j = (mean_i c_ij^p)^(1/p). Column-wise and permutation
    invariant over token order.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim < 2 or tokens.shape[-2] < 1:
        raise ShapeError(f"expected (..., L, d) tokens with L >= 1, got shape {tokens.shape}")
    if not (isinstance(p, (int, float, np.floating)) and math.isfinite(p) and p >= 1):
        raise InvalidArgumentError(f"GeM exponent must be finite and >= 1, got {p!r}")
    clamped = np.maximum(tokens, GEM_FLOOR)
    return np.mean(clamped**p, axis=-2) ** (1.0 / p)


def gem_pool_backward(tokens: np.ndarray, p: float, grad_out: np.ndarray):
    """Gradients of gem_pool with respect to the tokens and the exponent.

    grad_out matches the pooled shape. Returns (d_tokens, d_p); d_p sums
    over the whole stack. Entries at or below the clamp floor receive zero
    token gradient (the max subgradient on the constant side).
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    length = tokens.shape[-2]
    clamped = np.maximum(tokens, GEM_FLOOR)
    powered = clamped**p
    mean_pow = powered.mean(axis=-2)
    out = mean_pow ** (1.0 / p)

    # d out_j / d c_ij = (out_j / mean_j) * c_ij^(p-1) / L
    d_clamped = np.expand_dims(grad_out * out / mean_pow, -2) * clamped ** (p - 1.0) / length
    d_tokens = np.where(tokens > GEM_FLOOR, d_clamped, 0.0)

    # d out_j / d p = out_j * (mean_i c^p ln c / (p mean_j) - ln(mean_j) / p^2)
    mean_pow_log = (powered * np.log(clamped)).mean(axis=-2)
    d_out_dp = out * (mean_pow_log / (p * mean_pow) - np.log(mean_pow) / (p * p))
    return d_tokens, float(np.sum(grad_out * d_out_dp))
