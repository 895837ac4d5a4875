"""Phase congruency maps and edge-guided attention.

A bank of log-Gabor filters (Gaussian transfer on a log-frequency axis,
exactly zero DC response) produces even/odd quadrature responses per scale
and orientation. Per orientation, the local energy of scale s is the
projection of its response vector onto the unit mean-phase vector across
scales; the phase congruency map divides thresholded energy by total
amplitude:

    PC = sum_s max(E_s - T, 0) / (sum_s A_s + eps)

with both sums pooled over the orientations of the bank before the single
division. (Dividing per orientation and averaging is the other defensible
reading, but orientations that barely respond then sweep their denominators
through the eps band and contrast invariance degrades by two orders of
magnitude.) Because the filters ignore the DC bin, the map is invariant to
additive intensity offsets, and with T = 0 it is invariant to contrast
scaling up to the eps stabilizer. An attention map is the sigmoid of a
small convolution of PC, and attention-modulated feature maps can be
blended with the raw phase map by softmax weights.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .core import GrayImage
from .errors import InvalidArgumentError, ShapeError
from .mmd import weights_from_logits


@dataclass
class LogGaborBank:
    """Frequency-domain transfer functions, indexed [scale, orientation]."""

    height: int
    width: int
    scales: int
    orientations: int
    wavelengths: np.ndarray
    transfer: np.ndarray  # (S, O, H, W) real, DC bin zero

    @property
    def center_frequencies(self) -> np.ndarray:
        return 1.0 / self.wavelengths


@dataclass
class PcParams:
    """Noise threshold T (energy units) and division stabilizer eps."""

    threshold: float = 0.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if not (math.isfinite(self.threshold) and self.threshold >= 0):
            raise InvalidArgumentError(f"threshold must be finite and >= 0, got {self.threshold!r}")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise InvalidArgumentError(f"epsilon must be finite and > 0, got {self.epsilon!r}")


@dataclass
class AttentionParams:
    """Odd-sized convolution kernel plus scalar bias for the attention head."""

    kernel: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        k = self.kernel.shape
        if self.kernel.ndim != 2 or k[0] != k[1] or k[0] % 2 == 0 or k[0] < 1:
            raise InvalidArgumentError(f"kernel must be square with odd size, got shape {k}")
        if not (np.all(np.isfinite(self.kernel)) and math.isfinite(self.bias)):
            raise InvalidArgumentError("kernel and bias must be finite")


@dataclass
class FusionLogits:
    """Three logits producing softmax blend weights (vis, ir, phase)."""

    vis: float = 0.0
    ir: float = 0.0
    phase: float = 0.0

    @property
    def weights(self) -> np.ndarray:
        return weights_from_logits([self.vis, self.ir, self.phase])


def radial_transfer(radius, center_freq: float, sigma_onf: float):
    """Log-Gabor radial component exp(-(ln(f/f0))^2 / (2 ln(sigma_onf)^2))."""
    r = np.asarray(radius, dtype=np.float64)
    log_ratio = np.log(r / center_freq)
    return np.exp(-(log_ratio**2) / (2.0 * math.log(sigma_onf) ** 2))


def build_log_gabor_bank(
    height: int,
    width: int,
    scales: int = 4,
    orientations: int = 6,
    min_wavelength: float = 3.0,
    mult: float = 2.1,
    sigma_onf: float = 0.55,
    sigma_theta: float | None = None,
) -> LogGaborBank:
    """Construct the filter bank on an H x W frequency grid.

    Center wavelengths grow geometrically from min_wavelength by mult per
    scale. When sigma_theta is None the angular spread is chosen so that
    adjacent orientations cross at half maximum. A high-order Butterworth
    low-pass (cutoff 0.45 cycles/px) trims energy beyond the Nyquist ring,
    and the DC bin is forced to exactly zero.
    """
    if height < 8 or width < 8:
        raise InvalidArgumentError(f"filter grid must be at least 8x8, got {height}x{width}")
    if scales < 2 or orientations < 1:
        raise InvalidArgumentError("need scales >= 2 and orientations >= 1")
    if min_wavelength < 2:
        raise InvalidArgumentError(f"min wavelength must be >= 2 px, got {min_wavelength!r}")
    if not mult > 1:
        raise InvalidArgumentError(f"wavelength multiplier must be > 1, got {mult!r}")
    if not (0 < sigma_onf < 1):
        raise InvalidArgumentError(f"sigma_onf must be in (0, 1), got {sigma_onf!r}")
    if sigma_theta is None:
        sigma_theta = (math.pi / (2 * orientations)) / math.sqrt(2.0 * math.log(2.0))

    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    radius = np.hypot(fy, fx)
    radius[0, 0] = 1.0  # placeholder so log() is finite; DC is zeroed below
    theta = np.arctan2(fy, fx)
    sin_t, cos_t = np.sin(theta), np.cos(theta)

    lowpass = 1.0 / (1.0 + (radius / 0.45) ** 30)
    wavelengths = min_wavelength * mult ** np.arange(scales, dtype=np.float64)

    transfer = np.empty((scales, orientations, height, width))
    radial = np.empty((scales, height, width))
    for s, wl in enumerate(wavelengths):
        radial[s] = radial_transfer(radius, 1.0 / wl, sigma_onf) * lowpass
        radial[s, 0, 0] = 0.0
    for o in range(orientations):
        angle = o * math.pi / orientations
        # angular distance via the sin/cos difference trick (wrap-safe)
        ds = sin_t * math.cos(angle) - cos_t * math.sin(angle)
        dc = cos_t * math.cos(angle) + sin_t * math.sin(angle)
        dtheta = np.abs(np.arctan2(ds, dc))
        spread = np.exp(-(dtheta**2) / (2.0 * sigma_theta**2))
        for s in range(scales):
            transfer[s, o] = radial[s] * spread
    transfer[:, :, 0, 0] = 0.0
    return LogGaborBank(
        height=height,
        width=width,
        scales=scales,
        orientations=orientations,
        wavelengths=wavelengths,
        transfer=transfer,
    )


def _quadrature_responses(pixels: np.ndarray, bank: LogGaborBank):
    """Even/odd responses per (scale, orientation): real/imag of the
    inverse FFT of the spectrum times the one-sided transfer."""
    spectrum = np.fft.fft2(pixels)
    responses = np.fft.ifft2(spectrum[None, None, :, :] * bank.transfer, axes=(-2, -1))
    return responses.real, responses.imag


def phase_congruency(img: GrayImage, bank: LogGaborBank, params: PcParams | None = None) -> GrayImage:
    """Phase congruency map in [0, 1] (orientations pooled)."""
    if params is None:
        params = PcParams()
    if (img.height, img.width) != (bank.height, bank.width):
        raise ShapeError(
            f"image {img.height}x{img.width} does not match bank {bank.height}x{bank.width}"
        )
    even, odd = _quadrature_responses(img.pixels, bank)
    amp = np.hypot(even, odd)

    sum_e = even.sum(axis=0)  # (O, H, W)
    sum_o = odd.sum(axis=0)
    # unit mean-phase vector per orientation; the tiny floor only guards
    # 0/0 where every response vanishes (numerator is then zero anyway)
    norm = np.maximum(np.hypot(sum_e, sum_o), 1e-300)
    mean_e = sum_e / norm
    mean_o = sum_o / norm

    energy = even * mean_e[None] + odd * mean_o[None]
    numer = np.maximum(energy - params.threshold, 0.0).sum(axis=(0, 1))
    denom = amp.sum(axis=(0, 1)) + params.epsilon
    return GrayImage.from_map(numer / denom)


def noise_threshold_from_image(img: GrayImage, bank: LogGaborBank, k: float = 2.0) -> float:
    """Data-driven threshold: k times the median finest-scale amplitude."""
    even, odd = _quadrature_responses(img.pixels, bank)
    return k * float(np.median(np.hypot(even[0], odd[0])))


def _correlate2d_reflect(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size sliding-window correlation with reflect-101 borders."""
    k = kernel.shape[0]
    pad = k // 2
    if pad == 0:
        return image * kernel[0, 0]
    padded = np.pad(image, pad, mode="reflect")
    h, w = image.shape
    out = np.zeros_like(image)
    for di in range(k):
        for dj in range(k):
            out += kernel[di, dj] * padded[di : di + h, dj : dj + w]
    return out


def edge_attention(pc: GrayImage, params: AttentionParams) -> GrayImage:
    """sigmoid(kernel * PC + bias); values strictly inside (0, 1)."""
    z = _correlate2d_reflect(pc.pixels, params.kernel) + params.bias
    return GrayImage(1.0 / (1.0 + np.exp(-z)))


def apply_attention(feature_map, attention) -> np.ndarray:
    """Elementwise attention modulation F' = A * F."""
    f = np.asarray(feature_map, dtype=np.float64)
    a = attention.pixels if isinstance(attention, GrayImage) else np.asarray(attention, dtype=np.float64)
    if f.shape != a.shape:
        raise ShapeError(f"feature map {f.shape} vs attention {a.shape}")
    return f * a


def adaptive_fusion(f_vis, f_ir, f_phase, logits: FusionLogits) -> np.ndarray:
    """Softmax-weighted convex combination of the three same-shape maps."""
    maps = [np.asarray(m, dtype=np.float64) for m in (f_vis, f_ir, f_phase)]
    if not (maps[0].shape == maps[1].shape == maps[2].shape):
        raise ShapeError(f"shapes differ: {[m.shape for m in maps]}")
    w = logits.weights
    return w[0] * maps[0] + w[1] * maps[1] + w[2] * maps[2]
