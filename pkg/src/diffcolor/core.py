"""Image containers, color-space conversions, deterministic RNG, and PNG I/O.

Images live in [0, 1] float64 throughout the pipeline; 8/16-bit quantization
happens only at file boundaries. Grayscale projection uses Rec.601 luma by
default (overridable via the module constant for callers that need Rec.709).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeMismatch

# Rec.601 luma weights; classic colorization work projects with these.
GRAY_WEIGHTS_601 = (0.299, 0.587, 0.114)
GRAY_WEIGHTS_709 = (0.2126, 0.7152, 0.0722)
GRAY_WEIGHTS = GRAY_WEIGHTS_601

MIN_SIDE = 8


def _validate_plane(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{what} contains non-finite values")
    lo, hi = float(data.min()), float(data.max())
    if lo < -1e-12 or hi > 1.0 + 1e-12:
        raise ValueError(f"{what} values outside [0, 1]: min={lo}, max={hi}")


@dataclasses.dataclass(frozen=True)
class GrayImage:
    """Single-channel image, H x W float64 in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"gray image must be 2-D, got shape {data.shape}")
        h, w = data.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValueError(f"image sides must be >= {MIN_SIDE}, got {h}x{w}")
        _validate_plane(data, "gray image")
        data = np.clip(data, 0.0, 1.0)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclasses.dataclass(frozen=True)
class ColorImage:
    """RGB image, 3 x H x W float64 in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] != 3:
            raise ValueError(f"color image must be 3xHxW, got shape {data.shape}")
        h, w = data.shape[1:]
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValueError(f"image sides must be >= {MIN_SIDE}, got {h}x{w}")
        _validate_plane(data, "color image")
        data = np.clip(data, 0.0, 1.0)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


class Rng:
    """Deterministic random stream: same seed, same draw sequence.

    Thin wrapper over numpy's PCG64 so the seed travels as a plain 64-bit
    int through configs, manifests and the HTTP API.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def spawn(self) -> "Rng":
        """Derive an independent child stream (deterministic per call order)."""
        child = Rng(int(self._gen.integers(0, 2**63 - 1)))
        return child


def rgb_to_gray(img: ColorImage, weights=GRAY_WEIGHTS) -> GrayImage:
    """Project RGB to luma (Rec.601 by default).

    Written as r + wg*(g-r) + wb*(b-r) so channel-equal pixels map to the
    common value exactly (the weights sum to 1 on paper, not in floats).
    """
    r, g, b = img.data[0], img.data[1], img.data[2]
    y = r + weights[1] * (g - r) + weights[2] * (b - r)
    return GrayImage(np.clip(y, 0.0, 1.0))


def replicate_gray(img: GrayImage) -> ColorImage:
    """Stack the gray plane into R=G=B so 3-channel encoders accept it."""
    return ColorImage(np.stack([img.data, img.data, img.data], axis=0))


# --- CIE L*a*b* (D65, sRGB companding) ---------------------------------------

_D65 = (0.95047, 1.0, 1.08883)
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_LAB_EPS = 216.0 / 24389.0
_LAB_KAPPA = 24389.0 / 27.0


def srgb_decompand(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def srgb_compand(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    c = np.maximum(c, 0.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _LAB_EPS, np.cbrt(t), (_LAB_KAPPA * t + 16.0) / 116.0)


def _lab_f_inv(ft: np.ndarray) -> np.ndarray:
    ft3 = ft**3
    return np.where(ft3 > _LAB_EPS, ft3, (116.0 * ft - 16.0) / _LAB_KAPPA)


def rgb_to_lab(img: ColorImage) -> np.ndarray:
    """sRGB -> CIE L*a*b* under D65. Returns 3xHxW (L in [0,100], a/b real)."""
    lin = srgb_decompand(img.data)
    xyz = np.einsum("ij,jhw->ihw", _RGB_TO_XYZ, lin)
    xr = xyz[0] / _D65[0]
    yr = xyz[1] / _D65[1]
    zr = xyz[2] / _D65[2]
    fx, fy, fz = _lab_f(xr), _lab_f(yr), _lab_f(zr)
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return np.stack([L, a, b], axis=0)


def lab_to_rgb(lab: np.ndarray) -> ColorImage:
    """CIE L*a*b* -> sRGB, clamped to [0, 1] for out-of-gamut values."""
    rgb = lab_to_rgb_raw(lab)
    return ColorImage(np.clip(rgb, 0.0, 1.0))


def lab_to_rgb_raw(lab: np.ndarray) -> np.ndarray:
    """Unclamped Lab -> sRGB conversion (out-of-gamut values pass through)."""
    lab = np.asarray(lab, dtype=np.float64)
    L, a, b = lab[0], lab[1], lab[2]
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    xr = _lab_f_inv(fx)
    yr = np.where(L > _LAB_KAPPA * _LAB_EPS, ((L + 16.0) / 116.0) ** 3, L / _LAB_KAPPA)
    zr = _lab_f_inv(fz)
    xyz = np.stack([xr * _D65[0], yr * _D65[1], zr * _D65[2]], axis=0)
    lin = np.einsum("ij,jhw->ihw", _XYZ_TO_RGB, xyz)
    return srgb_compand(lin)


def gray_to_lab_l(g: np.ndarray) -> np.ndarray:
    """L* of the neutral color (g, g, g); the lightness a gray pixel carries."""
    y = srgb_decompand(g)
    return 116.0 * _lab_f(y) - 16.0


# --- PNG I/O ------------------------------------------------------------------


def load_image(path) -> ColorImage:
    """Read a PNG (8- or 16-bit, any mode) and normalize to [0, 1] RGB."""
    with Image.open(path) as im:
        if im.mode == "I;16":
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            arr = np.stack([arr, arr, arr], axis=0)
        elif im.mode == "I":
            arr = np.asarray(im, dtype=np.float64) / 65535.0
            arr = np.stack([arr, arr, arr], axis=0)
        else:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
            arr = arr.transpose(2, 0, 1)
    return ColorImage(np.clip(arr, 0.0, 1.0))


def load_gray(path) -> GrayImage:
    return rgb_to_gray(load_image(path))


def save_image(img: ColorImage | GrayImage, path, bit_depth: int = 8) -> None:
    """Write a PNG; values are quantized round-half-up at this boundary only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(img, GrayImage):
        data = img.data[None, ...]
    else:
        data = img.data
    if bit_depth == 8:
        q = np.floor(data * 255.0 + 0.5).astype(np.uint8)
        if q.shape[0] == 1:
            Image.fromarray(q[0], mode="L").save(path, format="PNG")
        else:
            Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
    elif bit_depth == 16:
        q = np.floor(data * 65535.0 + 0.5).astype(np.uint16)
        if q.shape[0] != 1:
            raise ValueError("16-bit PNG output supports grayscale only")
        Image.fromarray(q[0]).save(path, format="PNG")
    else:
        raise ValueError(f"unsupported bit depth {bit_depth}")


def image_equal(a: ColorImage, b: ColorImage) -> bool:
    return a.data.shape == b.data.shape and bool(np.array_equal(a.data, b.data))


def check_same_size(a, b) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise ShapeMismatch(
            f"size mismatch: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
