"""Shared numeric substrate: images, saliency maps, top-alpha masks, fills, curves.

Everything in here is a pure function of its inputs (plus explicit seeds), and
all container types freeze their arrays after validation so values can be
shared safely across threads.
"""

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ImageTensor",
    "SaliencyMap",
    "PerturbationMask",
    "PerturbationSchedule",
    "PerturbationCurve",
    "MaskFill",
    "DEFAULT_ALPHAS",
    "round_half_up",
    "top_alpha_mask",
    "apply_mask",
    "fill_pixels",
    "curve_auc",
    "gaussian_blur",
    "bilinear_resize",
]

#: Perturbation fractions used everywhere by default: 10% steps from 0.1 to 0.9.
DEFAULT_ALPHAS = tuple(round(0.1 * i, 1) for i in range(1, 10))


def round_half_up(x):
    """Round to the nearest integer, halves away from zero toward +inf."""
    return int(math.floor(x + 0.5))


def _freeze(arr):
    arr.setflags(write=False)
    return arr


class ImageTensor:
    """An H×W×C image with float values in [0, 1], row-major (row, column, channel)."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3:
            raise ValueError(f"image must have shape H×W or H×W×C, got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dimensions must be positive, got {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {arr.shape[2]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(
                f"image values must lie in [0, 1], got range "
                f"[{arr.min():.6g}, {arr.max():.6g}]"
            )
        self.data = _freeze(arr)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def __eq__(self, other):
        return isinstance(other, ImageTensor) and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"ImageTensor({self.height}x{self.width}x{self.channels})"


class SaliencyMap:
    """Per-pixel relevance values (any sign, finite) matching an explained image."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"saliency map must be H×W, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"saliency dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("saliency map contains non-finite values (NaN or inf)")
        self.values = _freeze(arr)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def __repr__(self):
        return f"SaliencyMap({self.height}x{self.width})"


class PerturbationMask:
    """Binary pixel mask selecting the top alpha fraction of a saliency map."""

    __slots__ = ("bits", "alpha")

    def __init__(self, bits, alpha):
        arr = np.array(bits, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"mask must be H×W, got shape {arr.shape}")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        expected = round_half_up(alpha * arr.shape[0] * arr.shape[1])
        actual = int(arr.sum())
        if actual != expected:
            raise ValueError(
                f"mask popcount {actual} does not match "
                f"round-half-up(alpha*H*W) = {expected} for alpha={alpha}"
            )
        self.bits = _freeze(arr)
        self.alpha = float(alpha)

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    def __repr__(self):
        return f"PerturbationMask({self.height}x{self.width}, alpha={self.alpha})"


@dataclass(frozen=True)
class PerturbationSchedule:
    """Ordered perturbation fractions; defaults to 10% steps 0.1..0.9."""

    alphas: tuple = DEFAULT_ALPHAS

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas:
            raise ValueError("schedule must contain at least one alpha")
        for a in alphas:
            if not 0.0 < a < 1.0:
                raise ValueError(f"schedule alphas must lie in (0, 1), got {a}")
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError(f"schedule alphas must be strictly increasing: {alphas}")
        object.__setattr__(self, "alphas", alphas)

    def __iter__(self):
        return iter(self.alphas)

    def __len__(self):
        return len(self.alphas)


def as_schedule(schedule):
    """Coerce a PerturbationSchedule, an alpha sequence, or None (default)."""
    if schedule is None:
        return PerturbationSchedule()
    if isinstance(schedule, PerturbationSchedule):
        return schedule
    return PerturbationSchedule(tuple(schedule))


@dataclass(frozen=True)
class PerturbationCurve:
    """Per-alpha metric values; the integrand sampled along the schedule."""

    alphas: tuple
    scores: tuple

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        scores = tuple(float(s) for s in self.scores)
        if len(alphas) != len(scores):
            raise ValueError(
                f"curve lengths differ: {len(alphas)} alphas, {len(scores)} scores"
            )
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError(f"curve alphas must be strictly increasing: {alphas}")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "scores", scores)


@dataclass(frozen=True)
class MaskFill:
    """How masked pixels are replaced: black, mean color, seeded noise, or blur."""

    variant: str
    seed: int = 0
    sigma: float = 0.0
    radius: int = 0

    _VARIANTS = ("black", "mean", "noise", "blur")

    def __post_init__(self):
        if self.variant not in self._VARIANTS:
            raise ValueError(f"unknown fill variant {self.variant!r}")
        if self.variant == "blur":
            if self.sigma <= 0:
                raise ValueError(f"blur sigma must be > 0, got {self.sigma}")
            if self.radius < 1:
                raise ValueError(f"blur radius must be >= 1, got {self.radius}")

    @classmethod
    def black(cls):
        return cls("black")

    @classmethod
    def mean_color(cls):
        return cls("mean")

    @classmethod
    def uniform_noise(cls, seed):
        return cls("noise", seed=int(seed))

    @classmethod
    def gaussian_blur(cls, sigma, radius):
        return cls("blur", sigma=float(sigma), radius=int(radius))

    @classmethod
    def parse(cls, text):
        """Parse a config spelling: black | mean | noise:<seed> | blur:<sigma>:<radius>."""
        parts = text.strip().split(":")
        name = parts[0]
        if name == "black" and len(parts) == 1:
            return cls.black()
        if name == "mean" and len(parts) == 1:
            return cls.mean_color()
        if name == "noise":
            if len(parts) == 1:
                return cls.uniform_noise(0)
            if len(parts) == 2:
                return cls.uniform_noise(int(parts[1]))
        if name == "blur":
            if len(parts) == 1:
                return cls.gaussian_blur(2.0, 4)
            if len(parts) == 3:
                return cls.gaussian_blur(float(parts[1]), int(parts[2]))
        raise ValueError(f"cannot parse fill spec {text!r}")

    def spec(self):
        if self.variant == "noise":
            return f"noise:{self.seed}"
        if self.variant == "blur":
            return f"blur:{self.sigma:g}:{self.radius}"
        return self.variant


def top_alpha_mask(saliency, alpha):
    """Select the round-half-up(alpha*H*W) most salient pixels as a binary mask.

    Ties are broken by ascending linear (row-major) index, so masks are
    deterministic and nested across alphas for a fixed map.
    """
    if not isinstance(saliency, SaliencyMap):
        saliency = SaliencyMap(saliency)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    h, w = saliency.height, saliency.width
    k = round_half_up(alpha * h * w)
    flat = saliency.values.ravel()
    # stable sort on -values keeps equal-valued pixels in ascending index order
    order = np.argsort(-flat, kind="stable")
    bits = np.zeros(h * w, dtype=bool)
    bits[order[:k]] = True
    return PerturbationMask(bits.reshape(h, w), alpha)


def fill_pixels(image, bits, fill):
    """Replace the pixels selected by a boolean H×W array according to `fill`.

    Black zeroes all channels; mean uses the per-channel mean of the whole
    image; noise samples a seeded uniform field in [0, 1); blur samples a
    Gaussian-blurred copy of the image at the masked positions.
    """
    if not isinstance(image, ImageTensor):
        image = ImageTensor(image)
    bits = np.asarray(bits, dtype=bool)
    if bits.shape != (image.height, image.width):
        raise ValueError(
            f"mask shape {bits.shape} does not match image "
            f"{(image.height, image.width)}"
        )
    out = image.data.copy()
    if fill.variant == "black":
        out[bits] = 0.0
    elif fill.variant == "mean":
        out[bits] = image.data.mean(axis=(0, 1))
    elif fill.variant == "noise":
        rng = np.random.default_rng(fill.seed)
        field = rng.random(image.data.shape)
        out[bits] = field[bits]
    elif fill.variant == "blur":
        blurred = gaussian_blur(image, fill.sigma, fill.radius)
        out[bits] = blurred.data[bits]
    else:  # pragma: no cover - MaskFill validates variants
        raise ValueError(f"unknown fill variant {fill.variant!r}")
    return ImageTensor(out)


def apply_mask(image, mask, fill):
    """Perturb an image by replacing the masked pixels according to `fill`.

    With the black fill this is exactly elementwise x * (1 - mask) applied to
    every channel of each masked pixel.
    """
    if not isinstance(image, ImageTensor):
        image = ImageTensor(image)
    if (mask.height, mask.width) != (image.height, image.width):
        raise ValueError(
            f"mask {mask.height}x{mask.width} does not match image "
            f"{image.height}x{image.width}"
        )
    return fill_pixels(image, mask.bits, fill)


def curve_auc(curve):
    """Trapezoidal area under the curve over alpha, normalized by the alpha span.

    The result reads as the mean height of the curve across the schedule.
    """
    if len(curve.alphas) < 2:
        raise ValueError("curve AUC needs at least 2 points")
    alphas = np.asarray(curve.alphas)
    scores = np.asarray(curve.scores)
    span = alphas[-1] - alphas[0]
    return float(np.trapezoid(scores, alphas) / span)


def _reflect_indices(n, radius):
    # symmetric reflection (edge repeated): ... c b a | a b c ... | c b a ...
    idx = np.arange(-radius, n + radius)
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m < n, m, period - 1 - m)


def _gaussian_kernel(sigma, radius):
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_blur(image, sigma, radius):
    """Separable Gaussian blur with reflective borders; kernel normalized to 1."""
    if not isinstance(image, ImageTensor):
        image = ImageTensor(image)
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = int(radius)
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    kernel = _gaussian_kernel(sigma, radius)
    data = image.data

    rows = _reflect_indices(data.shape[0], radius)
    padded = data[rows, :, :]
    out = np.zeros_like(data)
    for i, kv in enumerate(kernel):
        out += kv * padded[i : i + data.shape[0], :, :]

    cols = _reflect_indices(data.shape[1], radius)
    padded = out[:, cols, :]
    final = np.zeros_like(data)
    for i, kv in enumerate(kernel):
        final += kv * padded[:, i : i + data.shape[1], :]

    # normalized kernel keeps values inside [min, max] of the input;
    # clip only the float dust at the boundaries
    return ImageTensor(np.clip(final, 0.0, 1.0))


def bilinear_resize(saliency, new_h, new_w):
    """Bilinear resampling with the align-corners-false convention."""
    if not isinstance(saliency, SaliencyMap):
        saliency = SaliencyMap(saliency)
    new_h, new_w = int(new_h), int(new_w)
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target dimensions must be >= 1, got {new_h}x{new_w}")
    src = saliency.values
    h, w = src.shape

    def axis_coords(n_src, n_dst):
        pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        pos = np.clip(pos, 0.0, n_src - 1.0)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = pos - lo
        return lo, hi, frac

    ylo, yhi, fy = axis_coords(h, new_h)
    xlo, xhi, fx = axis_coords(w, new_w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = src[ylo][:, xlo] * (1 - fx) + src[ylo][:, xhi] * fx
    bot = src[yhi][:, xlo] * (1 - fx) + src[yhi][:, xhi] * fx
    return SaliencyMap(top * (1 - fy) + bot * fy)
