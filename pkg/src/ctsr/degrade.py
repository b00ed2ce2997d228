"""Low-dose photon noise and a two-order blind degradation chain (Real-ESRGAN style).

All images here are 2-D float arrays in [0, 1]. Everything random is driven by
explicit seeds so a given ``(image, seed)`` always yields the same LR output.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import fft, ndimage

from .errors import ConfigError, PreconditionError
from .seeding import numpy_rng

RESIZE_KERNELS = ("nearest", "bilinear", "bicubic")
DEFAULT_BLANK_FLUX = 0.5e5
DEFAULT_MU_SCALE = 4.0

DEFAULT_RANGES = {
    "kernel_size": [3, 11],
    "sigma": [0.2, 3.0],
    "sigma_second": [0.2, 1.5],
    "aniso_prob": 0.5,
    "resize_factor": [0.5, 1.5],
    "gaussian_prob": 0.5,
    "gaussian_sigma": [0.002, 0.03],
    "gaussian_sigma_second": [0.002, 0.02],
    "poisson_scale": [0.05, 0.5],
    "poisson_scale_second": [0.05, 0.3],
    "quality": [30, 95],
    "second_order_prob": 0.8,
}

# IJG standard luminance quantization table
_JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class DoseParams:
    blank_flux: float = DEFAULT_BLANK_FLUX
    mu_scale: float = DEFAULT_MU_SCALE


@dataclass(frozen=True)
class BlurParams:
    kind: str  # iso | aniso
    sigma_x: float
    sigma_y: float
    angle: float
    kernel_size: int


@dataclass(frozen=True)
class ResizeParams:
    kernel: str
    factor: float


@dataclass(frozen=True)
class NoiseParams:
    kind: str  # gaussian | poisson
    strength: float


@dataclass(frozen=True)
class OrderParams:
    blur: BlurParams
    resize: ResizeParams
    noise: NoiseParams
    quality: int


@dataclass(frozen=True)
class DegradationRecipe:
    first: OrderParams
    second: OrderParams | None
    final_scale: int
    final_kernel: str = "bicubic"
    seed: int = 0
    orders: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "orders", tuple(o for o in (self.first, self.second) if o is not None))

    def to_dict(self) -> dict:
        return {
            "first": asdict(self.first),
            "second": asdict(self.second) if self.second is not None else None,
            "final_scale": self.final_scale,
            "final_kernel": self.final_kernel,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationRecipe":
        def order(o):
            if o is None:
                return None
            return OrderParams(BlurParams(**o["blur"]), ResizeParams(**o["resize"]), NoiseParams(**o["noise"]), int(o["quality"]))

        return cls(order(d["first"]), order(d["second"]), int(d["final_scale"]), d["final_kernel"], int(d["seed"]))


# ------------------------------------------------------------------ dose

def simulate_low_dose(img, dose: DoseParams, seed: int) -> np.ndarray:
    """Image-domain photon-starvation noise at blank flux ``b``.

    Each pixel is treated as a line integral ``mu_scale * img``; counts are
    ``Poisson(b * exp(-mu_scale * img))`` and the log-transformed estimate is
    mapped back to image units.
    """
    if dose.blank_flux <= 0:
        raise ConfigError(f"blank flux must be positive, got {dose.blank_flux}")
    if dose.mu_scale <= 0:
        raise ConfigError(f"mu_scale must be positive, got {dose.mu_scale}")
    x = np.asarray(img, dtype=np.float64)
    lam = dose.blank_flux * np.exp(-dose.mu_scale * x)
    counts = numpy_rng(seed, "dose").poisson(lam)
    out = -np.log(np.maximum(counts, 1) / dose.blank_flux) / dose.mu_scale
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- resize

def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric: ... b a | a b c ... c | c b ...
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = (a + 2) * x[near] ** 3 - (a + 3) * x[near] ** 2 + 1
    out[far] = a * x[far] ** 3 - 5 * a * x[far] ** 2 + 8 * a * x[far] - 4 * a
    return out


def resize_matrix(n_in: int, n_out: int, kernel: str) -> np.ndarray:
    """Dense ``n_out x n_in`` interpolation matrix (half-pixel centres, reflect boundary)."""
    if kernel not in RESIZE_KERNELS:
        raise ConfigError(f"unknown resize kernel {kernel!r}")
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if kernel == "nearest":
        src = np.minimum(np.floor((rows + 0.5) * scale).astype(int), n_in - 1)
        w[rows, src] = 1.0
        return w
    x = (rows + 0.5) * scale - 0.5
    base = np.floor(x).astype(int)
    frac = x - base
    if kernel == "bilinear":
        offsets = np.array([0, 1])
        weights = np.stack([1.0 - frac, frac], axis=1)
    else:
        offsets = np.array([-1, 0, 1, 2])
        weights = _cubic(frac[:, None] - offsets[None, :])
    cols = _reflect(base[:, None] + offsets[None, :], n_in)
    for k in range(len(offsets)):
        np.add.at(w, (rows, cols[:, k]), weights[:, k])
    return w


def resize(img, factor: float | None = None, *, size=None, kernel: str = "bicubic") -> np.ndarray:
    """Separable resize by ``factor`` or to ``size`` (int or (h, w)); output clamped to [0, 1]."""
    x = np.asarray(img, dtype=np.float64)
    h, w = x.shape
    if size is None:
        if factor is None:
            raise ConfigError("resize needs a factor or a size")
        out_h, out_w = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    elif np.isscalar(size):
        out_h = out_w = int(size)
    else:
        out_h, out_w = (int(s) for s in size)
    if min(out_h, out_w) < 8:
        raise PreconditionError(f"resize target {out_h}x{out_w} is below the 8-pixel minimum")
    if (out_h, out_w) == (h, w):
        return np.clip(x, 0.0, 1.0).astype(np.float32)
    out = resize_matrix(h, out_h, kernel) @ x @ resize_matrix(w, out_w, kernel).T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ------------------------------------------------------------------ blur

def gaussian_kernel(kernel_size: int, sigma_x: float, sigma_y: float, angle: float = 0.0) -> np.ndarray:
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ConfigError(f"kernel size must be odd and positive, got {kernel_size}")
    r = kernel_size // 2
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    u = xx * c + yy * s
    v = -xx * s + yy * c
    k = np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))
    return k / k.sum()


def blur(img, params: BlurParams) -> np.ndarray:
    k = gaussian_kernel(params.kernel_size, params.sigma_x, params.sigma_y, params.angle)
    return ndimage.convolve(np.asarray(img, dtype=np.float64), k, mode="reflect")


# ----------------------------------------------------------------- noise

def add_noise(img, params: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    if params.strength == 0:
        return x
    if params.kind == "gaussian":
        out = x + params.strength * rng.standard_normal(x.shape)
    elif params.kind == "poisson":
        levels = 255.0
        shot = rng.poisson(np.clip(x, 0.0, 1.0) * levels) / levels
        out = x + params.strength * (shot - x)
    else:
        raise ConfigError(f"unknown noise kind {params.kind!r}")
    return np.clip(out, 0.0, 1.0)


# ----------------------------------------------------------- compression

def quant_table(quality: int) -> np.ndarray:
    quality = int(np.clip(quality, 1, 100))
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((_JPEG_LUMA * scale + 50.0) / 100.0), 1.0, 255.0)


def compress_surrogate(img, quality: int) -> np.ndarray:
    """Blockwise 8x8 DCT quantization, a codec-free stand-in for JPEG.

    AC coefficients are quantized with the scaled luminance table; DC is kept
    exact so flat regions pass through unchanged.
    """
    if not 10 <= quality <= 95:
        raise PreconditionError(f"quality must be in [10, 95], got {quality}")
    x = np.asarray(img, dtype=np.float64)
    h, w = x.shape
    ph, pw = (-h) % 8, (-w) % 8
    padded = np.pad(x, ((0, ph), (0, pw)), mode="symmetric") * 255.0 - 128.0
    H, W = padded.shape
    blocks = padded.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coef = fft.dctn(blocks, axes=(2, 3), norm="ortho")
    q = quant_table(quality)
    quant = np.round(coef / q) * q
    quant[..., 0, 0] = coef[..., 0, 0]
    rec = fft.idctn(quant, axes=(2, 3), norm="ortho")
    rec = rec.transpose(0, 2, 1, 3).reshape(H, W)[:h, :w]
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)


# ---------------------------------------------------------------- recipes

def _sample_order(rng, ranges: dict, second: bool) -> OrderParams:
    suffix = "_second" if second else ""
    k_lo, k_hi = ranges["kernel_size"]
    kernel_size = int(rng.choice(np.arange(k_lo, k_hi + 1, 2)))
    s_lo, s_hi = ranges["sigma" + suffix]
    log_uniform = lambda: float(np.exp(rng.uniform(np.log(s_lo), np.log(s_hi))))  # noqa: E731
    if rng.random() < ranges["aniso_prob"]:
        blur_p = BlurParams("aniso", log_uniform(), log_uniform(), float(rng.uniform(-np.pi, np.pi)), kernel_size)
    else:
        sigma = log_uniform()
        blur_p = BlurParams("iso", sigma, sigma, 0.0, kernel_size)
    f_lo, f_hi = ranges["resize_factor"]
    resize_p = ResizeParams(str(rng.choice(RESIZE_KERNELS)), float(rng.uniform(f_lo, f_hi)))
    if rng.random() < ranges["gaussian_prob"]:
        lo, hi = ranges["gaussian_sigma" + suffix]
        noise_p = NoiseParams("gaussian", float(rng.uniform(lo, hi)))
    else:
        lo, hi = ranges["poisson_scale" + suffix]
        noise_p = NoiseParams("poisson", float(rng.uniform(lo, hi)))
    q_lo, q_hi = ranges["quality"]
    quality = int(rng.integers(q_lo, q_hi + 1))
    return OrderParams(blur_p, resize_p, noise_p, quality)


def sample_recipe(seed: int, ranges: dict | None = None, final_scale: int = 2) -> DegradationRecipe:
    if final_scale not in (2, 4):
        raise ConfigError(f"final_scale must be 2 or 4, got {final_scale}")
    ranges = {**DEFAULT_RANGES, **(ranges or {})}
    rng = numpy_rng(seed, "recipe")
    first = _sample_order(rng, ranges, second=False)
    second = _sample_order(rng, ranges, second=True)
    if rng.random() >= ranges["second_order_prob"]:
        second = None
    final_kernel = str(rng.choice(RESIZE_KERNELS))
    return DegradationRecipe(first, second, final_scale, final_kernel, int(seed))


def identity_recipe(final_scale: int = 1) -> DegradationRecipe:
    """Near-identity chain; ``final_scale=1`` is a debug mode not produced by :func:`sample_recipe`."""
    order = OrderParams(
        BlurParams("iso", 1e-3, 1e-3, 0.0, 3),
        ResizeParams("bicubic", 1.0),
        NoiseParams("gaussian", 0.0),
        95,
    )
    return DegradationRecipe(order, None, final_scale, "bicubic", 0)


def apply_degradation(img, recipe: DegradationRecipe) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    h, w = x.shape
    if h % recipe.final_scale or w % recipe.final_scale:
        raise PreconditionError(f"image {h}x{w} is not divisible by scale {recipe.final_scale}")
    rng = numpy_rng(recipe.seed, "noise")
    for order in recipe.orders:
        x = blur(x, order.blur)
        x = resize(x, order.resize.factor, kernel=order.resize.kernel)
        x = add_noise(x, order.noise, rng)
        x = compress_surrogate(x, order.quality)
    target = (h // recipe.final_scale, w // recipe.final_scale)
    if x.shape != target:
        x = resize(x, size=target, kernel=recipe.final_kernel)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def degrade_item(hr, dose: DoseParams, seed: int, scale: int, ranges: dict | None = None):
    """Dose noise on the HR image, then a sampled two-order chain. Returns ``(lr, recipe)``."""
    noisy = simulate_low_dose(hr, dose, seed)
    recipe = sample_recipe(seed, ranges, scale)
    return apply_degradation(noisy, recipe), recipe
