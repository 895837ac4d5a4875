"""Multi-scale Gaussian-kernel maximum mean discrepancy.

The statistic mixes M Gaussian kernels with softmax weights:

    K(x, y) = sum_m alpha_m * exp(-||x - y||^2 / (2 sigma_m^2))

and plugs K into the unbiased two-sample estimator whose within-set terms
exclude the diagonal with 1/(n(n-1)) normalization while the cross term
averages over all n_s * n_t pairs. Bandwidths come from the median
heuristic on the pooled sample stack expanded into a centered geometric
ladder; they are recomputed per batch and held constant under
differentiation (no gradient through the median). Kernel weights are the
only kernel parameters that receive gradients, via their logits.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateInputError,
    InsufficientSamplesError,
    InvalidArgumentError,
    ShapeError,
)


@dataclass
class KernelParams:
    """Bandwidth ladder plus weight logits; weights = softmax(logits)."""

    bandwidths: np.ndarray
    weight_logits: np.ndarray

    def __post_init__(self):
        self.bandwidths = np.asarray(self.bandwidths, dtype=np.float64).reshape(-1)
        self.weight_logits = np.asarray(self.weight_logits, dtype=np.float64).reshape(-1)
        if self.bandwidths.size < 1:
            raise InvalidArgumentError("need at least one kernel")
        if self.bandwidths.shape != self.weight_logits.shape:
            raise ShapeError(
                f"{self.bandwidths.size} bandwidths vs {self.weight_logits.size} logits"
            )
        if not np.all(np.isfinite(self.bandwidths)) or np.any(self.bandwidths <= 0):
            raise InvalidArgumentError("bandwidths must be finite and > 0")
        if not np.all(np.isfinite(self.weight_logits)):
            raise InvalidArgumentError("weight logits must be finite")

    @property
    def m(self) -> int:
        return self.bandwidths.size

    @property
    def weights(self) -> np.ndarray:
        return weights_from_logits(self.weight_logits)


@dataclass
class MmdGradients:
    """Gradients of the squared MMD with respect to its inputs."""

    dx: np.ndarray
    dy: np.ndarray
    dlogits: np.ndarray


def weights_from_logits(logits) -> np.ndarray:
    """Numerically stable softmax (max subtracted before exponentiation)."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if z.size < 1:
        raise InvalidArgumentError("need at least one logit")
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("logits must be finite")
    e = np.exp(z - z.max())
    return e / e.sum()


def pairwise_sq_dists(z) -> np.ndarray:
    """Pairwise squared Euclidean distances of the rows of an n x d matrix.

    Uses the ||a||^2 + ||b||^2 - 2 a.b expansion with negatives clamped to
    zero; only the upper triangle is kept and mirrored so the result is
    exactly symmetric with an exactly zero diagonal.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ShapeError(f"expected n x d matrix with n >= 1, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("input matrix contains non-finite entries")
    sq = np.einsum("ij,ij->i", z, z)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    np.maximum(d2, 0.0, out=d2)
    upper = np.triu(d2, k=1)
    return upper + upper.T


def median_bandwidth(d2: np.ndarray) -> float:
    """sqrt(median(off-diagonal squared distances) / 2).

    The median of an even count is the mean of the two central values. An
    all-zero (or zero-median) off-diagonal multiset is rejected because it
    cannot produce a positive bandwidth.
    """
    d2 = np.asarray(d2, dtype=np.float64)
    n = d2.shape[0]
    if d2.ndim != 2 or d2.shape[1] != n:
        raise ShapeError(f"distance matrix must be square, got shape {d2.shape}")
    if n < 2:
        raise InsufficientSamplesError("need at least two samples for a median bandwidth")
    off = d2[np.triu_indices(n, k=1)]
    med = float(np.median(off))
    if med <= 0.0:
        raise DegenerateInputError("median off-diagonal squared distance is zero")
    return math.sqrt(med / 2.0)


def bandwidth_ladder(sigma_base: float, m: int, gamma: float = 2.0) -> np.ndarray:
    """Centered geometric ladder sigma_base * gamma^(k - ceil(m/2)), k = 1..m."""
    if not (isinstance(m, (int, np.integer)) and m >= 1):
        raise InvalidArgumentError(f"kernel count must be a positive integer, got {m!r}")
    if not (math.isfinite(sigma_base) and sigma_base > 0):
        raise InvalidArgumentError(f"base bandwidth must be finite and > 0, got {sigma_base!r}")
    if not (math.isfinite(gamma) and gamma > 1):
        raise InvalidArgumentError(f"ladder ratio must be finite and > 1, got {gamma!r}")
    center = math.ceil(m / 2)
    return sigma_base * gamma ** np.arange(1 - center, m + 1 - center, dtype=np.float64)


def median_ladder_params(x, y, m: int = 5, gamma: float = 2.0, logits=None) -> KernelParams:
    """Kernel parameters from the median heuristic on the pooled stack [x; y]."""
    stack = np.concatenate([np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)])
    sigma = median_bandwidth(pairwise_sq_dists(stack))
    if logits is None:
        logits = np.zeros(m)
    return KernelParams(bandwidth_ladder(sigma, m, gamma), logits)


@dataclass
class KernelSettings:
    """Policy for building per-batch kernel parameters.

    With fixed_bandwidths unset, each two-sample statistic recomputes the
    median-heuristic ladder from its own pooled operands; the weight logits
    are shared (and may be trained through MmdGradients.dlogits).
    """

    kernels: int = 5
    gamma: float = 2.0
    logits: np.ndarray = None
    fixed_bandwidths: np.ndarray | None = None

    def __post_init__(self):
        if self.logits is None:
            self.logits = np.zeros(self.kernels)
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        if self.logits.size != self.kernels:
            raise ShapeError(f"{self.logits.size} logits for {self.kernels} kernels")
        if self.fixed_bandwidths is not None:
            self.fixed_bandwidths = np.asarray(self.fixed_bandwidths, dtype=np.float64).reshape(-1)
            if self.fixed_bandwidths.size != self.kernels:
                raise ShapeError("fixed bandwidth count does not match kernel count")

    def resolve(self, x, y) -> KernelParams:
        if self.fixed_bandwidths is not None:
            return KernelParams(self.fixed_bandwidths, self.logits)
        return median_ladder_params(x, y, self.kernels, self.gamma, self.logits)


def fused_kernel(d2, params: KernelParams):
    """Weighted kernel mix evaluated at squared distance(s) d2; in (0, 1]."""
    d2 = np.asarray(d2, dtype=np.float64)
    if d2.size and (not np.all(np.isfinite(d2)) or np.any(d2 < 0)):
        raise InvalidArgumentError("squared distances must be finite and >= 0")
    alphas = params.weights
    flat = d2.reshape(-1)
    acc = np.zeros_like(flat)
    for a, s in zip(alphas, params.bandwidths):
        acc += a * np.exp(flat / (-2.0 * s * s))
    out = acc.reshape(d2.shape)
    return float(out) if out.ndim == 0 else out


def _check_two_sample(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(f"expected 2-D sample matrices, got {x.shape} and {y.shape}")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature widths differ: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise InsufficientSamplesError(
            f"need at least two samples per set, got {x.shape[0]} and {y.shape[0]}"
        )
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidArgumentError("sample matrices contain non-finite entries")
    return x, y


def _per_kernel_terms(x, y, params):
    """Per-kernel squared-MMD values v_m (the estimator is linear in the kernel).

    Distances come from one pooled stack [x; y]; the within-set sums use the
    upper triangle only, doubled.
    """
    ns, nt = x.shape[0], y.shape[0]
    d2 = pairwise_sq_dists(np.concatenate([x, y]))
    iu_s = np.triu_indices(ns, k=1)
    iu_t = np.triu_indices(nt, k=1)
    d2_ss = d2[:ns, :ns][iu_s]
    d2_tt = d2[ns:, ns:][iu_t]
    d2_st = d2[:ns, ns:]
    values = np.empty(params.m)
    for k, s in enumerate(params.bandwidths):
        inv = -0.5 / (s * s)
        k_ss = np.exp(d2_ss * inv).sum() * 2.0 / (ns * (ns - 1))
        k_tt = np.exp(d2_tt * inv).sum() * 2.0 / (nt * (nt - 1))
        k_st = np.exp(d2_st * inv).sum() * 2.0 / (ns * nt)
        values[k] = k_ss + k_tt - k_st
    return values, d2


def mmd2_unbiased(x, y, params: KernelParams) -> float:
    """Squared MMD between the row clouds of x (n_s x d) and y (n_t x d)."""
    x, y = _check_two_sample(x, y)
    values, _ = _per_kernel_terms(x, y, params)
    return float(params.weights @ values)


def mmd2_grad(x, y, params: KernelParams):
    """Squared MMD plus exact gradients in x, y, and the weight logits.

    Bandwidths are treated as constants. The logit gradient is the softmax
    Jacobian applied to the per-kernel MMD values.
    """
    x, y = _check_two_sample(x, y)
    ns, nt = x.shape[0], y.shape[0]
    values, d2 = _per_kernel_terms(x, y, params)
    alphas = params.weights
    value = float(alphas @ values)

    # W = sum_m alpha_m / sigma_m^2 * exp(-d2 / (2 sigma_m^2)), the radial
    # weight of the kernel-mix derivative.
    w = np.zeros_like(d2)
    for a, s in zip(alphas, params.bandwidths):
        w += (a / (s * s)) * np.exp(d2 / (-2.0 * s * s))
    w_ss = w[:ns, :ns]
    w_tt = w[ns:, ns:]
    w_st = w[:ns, ns:]

    c_ss = 2.0 / (ns * (ns - 1))
    c_tt = 2.0 / (nt * (nt - 1))
    c_st = 2.0 / (ns * nt)
    # sum_j W_ij (a_i - b_j) = rowsum(W) a_i - W @ b; the i = j diagonal terms
    # vanish because a_i - a_i = 0.
    dx = -c_ss * (w_ss.sum(axis=1)[:, None] * x - w_ss @ x)
    dx += c_st * (w_st.sum(axis=1)[:, None] * x - w_st @ y)
    dy = -c_tt * (w_tt.sum(axis=1)[:, None] * y - w_tt @ y)
    dy += c_st * (w_st.sum(axis=0)[:, None] * y - w_st.T @ x)

    dlogits = alphas * (values - value)
    return value, MmdGradients(dx=dx, dy=dy, dlogits=dlogits)
