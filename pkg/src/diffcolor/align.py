"""Spatial alignment: transplant generated chroma onto the input's structure.

`align_chroma` keeps the colorized image's a/b chroma and re-solves the
lightness channel per pixel so the output's gray projection matches the
input grayscale (bisection on the monotone L -> luma map; pixels whose
target luma is unreachable for their chroma land on the closest gamut
boundary). `align_correspondence` first warps the chroma along a
multi-scale patch-match field between the two luminance planes, then
applies the same luminance restore.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .core import (
    GRAY_WEIGHTS,
    ColorImage,
    GrayImage,
    lab_to_rgb_raw,
    rgb_to_gray,
    rgb_to_lab,
)
from .errors import SizeMismatch

_BISECTION_ITERS = 30
_LUMA_TOL = 1e-5
_MAX_SHRINK_ROUNDS = 10


def _luma_flat(L: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lab = np.stack([L, a, b])[:, :, None]  # 3 x N x 1 for the converter
    rgb = np.clip(lab_to_rgb_raw(lab), 0.0, 1.0)[:, :, 0]
    return GRAY_WEIGHTS[0] * rgb[0] + GRAY_WEIGHTS[1] * rgb[1] + GRAY_WEIGHTS[2] * rgb[2]


def _solve_lightness(target: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Bisect the monotone L -> luma map so luma(L, a, b) == target (flat arrays)."""
    lo = np.zeros_like(target)
    hi = np.full_like(target, 100.0)
    for _ in range(_BISECTION_ITERS):
        mid = 0.5 * (lo + hi)
        too_dark = _luma_flat(mid, a, b) < target
        lo = np.where(too_dark, mid, lo)
        hi = np.where(too_dark, hi, mid)
    return 0.5 * (lo + hi)


def _check_size(gray: GrayImage, colorized: ColorImage) -> None:
    if (gray.height, gray.width) != (colorized.height, colorized.width):
        raise SizeMismatch(
            f"gray is {gray.height}x{gray.width}, "
            f"colorized is {colorized.height}x{colorized.width}"
        )


def align_chroma(gray: GrayImage, colorized: ColorImage) -> ColorImage:
    """Keep the colorized chroma, restore the input's exact luminance.

    Pixels whose target luma is unreachable at their full chroma (gamut
    limits) have their chroma compressed toward neutral until it is; the
    luminance match is exact everywhere up to solver resolution.
    """
    _check_size(gray, colorized)
    h, w = gray.data.shape
    lab = rgb_to_lab(colorized)
    a = lab[1].reshape(-1).copy()
    b = lab[2].reshape(-1).copy()
    target = gray.data.reshape(-1)

    L = _solve_lightness(target, a, b)
    miss = np.abs(_luma_flat(L, a, b) - target)
    for _ in range(_MAX_SHRINK_ROUNDS):
        bad = miss > _LUMA_TOL
        if not bad.any():
            break
        a[bad] *= 0.5
        b[bad] *= 0.5
        L[bad] = _solve_lightness(target[bad], a[bad], b[bad])
        miss[bad] = np.abs(_luma_flat(L[bad], a[bad], b[bad]) - target[bad])

    lab_out = np.stack([L, a, b]).reshape(3, h, w)
    out = np.clip(lab_to_rgb_raw(lab_out), 0.0, 1.0)
    return ColorImage(out)


# -- dense correspondence (patch-match) --------------------------------------------


@dataclasses.dataclass
class AlignConfig:
    patch_size: int = 7
    scales: int = 3
    iterations: int = 4
    search_alpha: float = 0.5
    seed: int = 0


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    return img[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def _patch_windows(img: np.ndarray, patch: int) -> np.ndarray:
    pad = patch // 2
    padded = np.pad(img, pad, mode="edge")
    return np.lib.stride_tricks.sliding_window_view(padded, (patch, patch))


def _field_cost(
    t_win: np.ndarray, s_win: np.ndarray, fy: np.ndarray, fx: np.ndarray
) -> np.ndarray:
    diff = t_win - s_win[fy, fx]
    return np.sum(diff * diff, axis=(-1, -2))


def _clamp_coords(fy, fx, h, w):
    return np.clip(fy, 0, h - 1), np.clip(fx, 0, w - 1)


def _patchmatch_scale(
    target: np.ndarray,
    source: np.ndarray,
    init_fy: np.ndarray,
    init_fx: np.ndarray,
    cfg: AlignConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    h, w = target.shape
    t_win = _patch_windows(target, cfg.patch_size)
    s_win = _patch_windows(source, cfg.patch_size)

    fy, fx = _clamp_coords(init_fy, init_fx, h, w)
    best = _field_cost(t_win, s_win, fy, fx)

    def consider(cy, cx):
        nonlocal fy, fx, best
        cy, cx = _clamp_coords(cy, cx, h, w)
        cost = _field_cost(t_win, s_win, cy, cx)
        better = cost < best
        fy = np.where(better, cy, fy)
        fx = np.where(better, cx, fx)
        best = np.where(better, cost, best)

    jump_offsets = [d for d in (8, 4, 2, 1) if d < max(h, w)]
    for _ in range(cfg.iterations):
        # propagation: adopt the neighbor's offset at several jump distances
        for d in jump_offsets:
            for dy, dx in ((d, 0), (-d, 0), (0, d), (0, -d)):
                cy = np.roll(fy, (dy, dx), axis=(0, 1)) + dy
                cx = np.roll(fx, (dy, dx), axis=(0, 1)) + dx
                consider(cy, cx)
        # random search: exponentially shrinking radius around the current best
        radius = float(max(h, w))
        while radius >= 1.0:
            r = int(np.ceil(radius))
            cy = fy + rng.integers(-r, r + 1, size=(h, w))
            cx = fx + rng.integers(-r, r + 1, size=(h, w))
            consider(cy, cx)
            radius *= cfg.search_alpha

    return fy, fx


def correspondence_field(
    gray: GrayImage, colorized: ColorImage, cfg: AlignConfig | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Dense NNF mapping each input pixel to its best match in the colorized image."""
    cfg = cfg or AlignConfig()
    _check_size(gray, colorized)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))

    target = gray.data
    source = rgb_to_gray(colorized).data

    # coarse-to-fine pyramid
    targets, sources = [target], [source]
    for _ in range(cfg.scales - 1):
        if min(targets[-1].shape) // 2 < cfg.patch_size:
            break
        targets.append(_downsample(targets[-1]))
        sources.append(_downsample(sources[-1]))

    fy = fx = None
    for level in range(len(targets) - 1, -1, -1):
        t, s = targets[level], sources[level]
        h, w = t.shape
        if fy is None:
            fy, fx = np.mgrid[0:h, 0:w]
        else:
            fy = np.repeat(np.repeat(fy * 2, 2, axis=0), 2, axis=1)[:h, :w]
            fx = np.repeat(np.repeat(fx * 2, 2, axis=0), 2, axis=1)[:h, :w]
            iy, ix = np.mgrid[0:h, 0:w]
            fy = fy + iy % 2
            fx = fx + ix % 2
        fy, fx = _patchmatch_scale(t, s, fy, fx, cfg, rng)
    return fy, fx


def align_correspondence(
    gray: GrayImage, colorized: ColorImage, cfg: AlignConfig | None = None
) -> ColorImage:
    """Warp the chroma along the correspondence field, then restore luminance."""
    _check_size(gray, colorized)
    fy, fx = correspondence_field(gray, colorized, cfg)
    warped = ColorImage(colorized.data[:, fy, fx])
    return align_chroma(gray, warped)


def mean_displacement(fy: np.ndarray, fx: np.ndarray) -> tuple[float, float]:
    """Average (dy, dx) of a correspondence field relative to the identity."""
    h, w = fy.shape
    iy, ix = np.mgrid[0:h, 0:w]
    return float(np.mean(fy - iy)), float(np.mean(fx - ix))
