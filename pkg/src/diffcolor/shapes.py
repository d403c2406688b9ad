"""Procedurally generated colored-shapes images.

These are the training distribution for the toy backend and the standard
fixture for end-to-end tests: small canvases with a solid background and a
few vividly colored rectangles / disks, fully determined by a seed.
"""

from __future__ import annotations

import numpy as np

from .core import ColorImage, Rng

# Saturated palette; vivid colors keep the toy color-statistics encoder honest.
PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],  # red
        [0.15, 0.65, 0.20],  # green
        [0.15, 0.30, 0.85],  # blue
        [0.95, 0.80, 0.10],  # yellow
        [0.85, 0.30, 0.75],  # magenta
        [0.15, 0.75, 0.80],  # cyan
        [0.95, 0.55, 0.15],  # orange
        [0.55, 0.25, 0.75],  # purple
    ]
)

BACKGROUNDS = np.array(
    [
        [0.85, 0.88, 0.92],
        [0.25, 0.28, 0.30],
        [0.70, 0.78, 0.60],
        [0.55, 0.45, 0.40],
    ]
)


def colored_shapes(
    rng: Rng, size: int = 32, n_shapes: int = 3, feather: float = 2.0
) -> ColorImage:
    """One random shapes image; consumes a fixed number of rng draws per shape.

    Edges are antialiased over `feather` pixels (signed-distance coverage),
    keeping the images band-limited enough for a small latent autoencoder.
    """
    bg = BACKGROUNDS[int(rng.integers(0, len(BACKGROUNDS)))]
    img = np.ones((3, size, size), dtype=np.float64) * bg[:, None, None]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(n_shapes):
        color = PALETTE[int(rng.integers(0, len(PALETTE)))]
        kind = int(rng.integers(0, 2))
        cy = int(rng.integers(size // 8, size - size // 8))
        cx = int(rng.integers(size // 8, size - size // 8))
        r = int(rng.integers(size // 8, size // 3))
        if kind == 0:
            dist = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) - r
        else:
            dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) - r
        alpha = np.clip(0.5 - dist / feather, 0.0, 1.0)
        img = img * (1.0 - alpha) + color[:, None, None] * alpha
    return ColorImage(np.clip(img, 0.0, 1.0))


def shapes_dataset(seed: int, count: int, size: int = 32) -> list[ColorImage]:
    rng = Rng(seed)
    return [colored_shapes(rng, size=size) for _ in range(count)]


def smooth_field(rng: Rng, size: int = 32, channels: int = 1) -> np.ndarray:
    """Band-limited random field in [0, 1]; test fixture for alignment metrics."""
    freq = 4
    coarse = rng.uniform(0.0, 1.0, size=(channels, freq, freq))
    out = np.empty((channels, size, size))
    # bilinear upsample of the coarse grid
    ys = np.linspace(0, freq - 1, size)
    xs = np.linspace(0, freq - 1, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, freq - 1)
    x1 = np.minimum(x0 + 1, freq - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    for c in range(channels):
        g = coarse[c]
        out[c] = (
            g[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
            + g[np.ix_(y1, x0)] * wy * (1 - wx)
            + g[np.ix_(y0, x1)] * (1 - wy) * wx
            + g[np.ix_(y1, x1)] * wy * wx
        )
    return np.clip(out, 0.0, 1.0)
