"""Image quality metrics and the batch comparison report runner.

PSNR/SSIM are self-contained; LPIPS-style distance and FID run over a
pluggable feature extractor (the toy adapter wraps the guidance image
encoder; real adapters can wrap pretrained networks behind the same
contract).
"""

from __future__ import annotations

import abc
import csv
import json
import math
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import ColorImage, load_image
from .errors import (
    InsufficientSamples,
    LengthMismatch,
    MissingPair,
    ShapeMismatch,
    TooSmall,
)
from .guidance import GuidanceBackend, cosine_similarity

PSNR_CAP_DB = 100.0


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def psnr(a: ColorImage, b: ColorImage, max_val: float = 1.0) -> float:
    """10 log10(max^2 / MSE), capped at 100 dB for (near-)identical images."""
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{a.data.shape} vs {b.data.shape}")
    err = mse(a.data, b.data)
    if err < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(max_val * max_val / err), PSNR_CAP_DB)


def ssim(
    a: ColorImage,
    b: ColorImage,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    max_val: float = 1.0,
) -> float:
    """Mean local SSIM over Gaussian windows, averaged across channels.

    Follows the original formulation: Gaussian-weighted local moments
    (truncate 3.5 gives the 11-tap window at sigma 1.5), statistics taken
    over valid interior windows only.
    """
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{a.data.shape} vs {b.data.shape}")
    h, w = a.data.shape[1:]
    if min(h, w) < window:
        raise TooSmall(f"min side {min(h, w)} smaller than window {window}")

    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    pad = (window - 1) // 2
    truncate = 3.5

    def blur(x):
        return gaussian_filter(x, sigma=sigma, truncate=truncate)

    vals = []
    for ch in range(a.data.shape[0]):
        x = a.data[ch]
        y = b.data[ch]
        ux, uy = blur(x), blur(y)
        uxx, uyy, uxy = blur(x * x), blur(y * y), blur(x * y)
        vx = uxx - ux * ux
        vy = uyy - uy * uy
        cxy = uxy - ux * uy
        s = ((2 * ux * uy + c1) * (2 * cxy + c2)) / (
            (ux * ux + uy * uy + c1) * (vx + vy + c2)
        )
        vals.append(float(np.mean(s[pad : h - pad, pad : w - pad])))
    return float(np.mean(vals))


# -- feature-space metrics ------------------------------------------------------


class FeatureExtractor(abc.ABC):
    """Deterministic image -> fixed-dimension feature vector."""

    dim: int

    @abc.abstractmethod
    def extract(self, img: ColorImage) -> np.ndarray: ...


class GuidanceFeatureExtractor(FeatureExtractor):
    """Toy adapter: features are the guidance backend's image embeddings."""

    def __init__(self, guidance: GuidanceBackend):
        self.guidance = guidance
        self.dim = guidance.embedding_dim

    def extract(self, img: ColorImage) -> np.ndarray:
        return np.asarray(self.guidance.encode_image(img), dtype=np.float64)


def lpips_like(a: ColorImage, b: ColorImage, extractor: FeatureExtractor) -> float:
    """L2 distance between unit-normalized extractor features (0 = identical)."""
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{a.data.shape} vs {b.data.shape}")
    fa = np.asarray(extractor.extract(a), dtype=np.float64)
    fb = np.asarray(extractor.extract(b), dtype=np.float64)
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na > 0:
        fa = fa / na
    if nb > 0:
        fb = fb / nb
    return float(np.linalg.norm(fa - fb))


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    """PSD square root via eigendecomposition; negative eigenvalues clamp to 0."""
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(set_a: np.ndarray, set_b: np.ndarray, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), covariances
    regularized by eps*I when a set is too small for full rank.
    """
    a = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"feature sets {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InsufficientSamples("need at least 2 samples per set")

    dim = a.shape[1]
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    s1 = np.cov(a, rowvar=False).reshape(dim, dim)
    s2 = np.cov(b, rowvar=False).reshape(dim, dim)
    if a.shape[0] < dim + 1:
        s1 = s1 + eps * np.eye(dim)
    if b.shape[0] < dim + 1:
        s2 = s2 + eps * np.eye(dim)

    sqrt_s1 = _sym_sqrt(s1)
    inner = _sym_sqrt(sqrt_s1 @ s2 @ sqrt_s1)
    d2 = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(inner))
    return max(d2, 0.0)


def clip_score(images, prompts, guidance: GuidanceBackend) -> float:
    """100 x mean over pairs of max(0, cosine(image embedding, text embedding))."""
    if len(images) != len(prompts):
        raise LengthMismatch(f"{len(images)} images vs {len(prompts)} prompts")
    total = 0.0
    for img, prompt in zip(images, prompts):
        cos = cosine_similarity(guidance.encode_image(img), guidance.encode_text(prompt).vector)
        total += max(0.0, cos)
    return 100.0 * total / len(images)


# -- batch report runner -----------------------------------------------------------


def run_report(
    outputs_dir,
    references_dir,
    prompts_file=None,
    extractor: FeatureExtractor | None = None,
    guidance: GuidanceBackend | None = None,
    out_dir=None,
    method_name: str | None = None,
) -> dict:
    """Compare a directory of outputs against matched reference PNGs.

    Writes report.csv and report.md into out_dir (defaults to outputs_dir)
    and returns the aggregate row as a dict. Filenames must match pairwise;
    a missing output raises MissingPair naming the file.
    """
    outputs_dir = Path(outputs_dir)
    references_dir = Path(references_dir)
    out_dir = Path(out_dir) if out_dir else outputs_dir

    if guidance is None:
        from .guidance import ToyGuidanceBackend

        guidance = ToyGuidanceBackend()
    if extractor is None:
        extractor = GuidanceFeatureExtractor(guidance)

    ref_files = sorted(p.name for p in references_dir.glob("*.png"))
    if not ref_files:
        raise MissingPair(f"no reference PNGs in {references_dir}")
    for name in ref_files:
        if not (outputs_dir / name).exists():
            raise MissingPair(f"output missing for reference {name}")

    prompts = None
    if prompts_file:
        prompts = json.loads(Path(prompts_file).read_text())

    rows = []
    feats_out, feats_ref = [], []
    out_images = {}
    for name in ref_files:
        ref = load_image(references_dir / name)
        out = load_image(outputs_dir / name)
        out_images[name] = out
        feats_out.append(extractor.extract(out))
        feats_ref.append(extractor.extract(ref))
        rows.append(
            {
                "file": name,
                "psnr": psnr(out, ref),
                "ssim": ssim(out, ref),
                "lpips": lpips_like(out, ref, extractor),
            }
        )

    aggregate = {
        "method": method_name or outputs_dir.name,
        "fid": fid(np.stack(feats_out), np.stack(feats_ref)),
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "lpips": float(np.mean([r["lpips"] for r in rows])),
    }
    if prompts is not None:
        try:
            pairs = [(out_images[n], prompts[n]) for n in ref_files]
        except KeyError as exc:
            raise MissingPair(f"prompt missing for file {exc.args[0]}") from exc
        aggregate["clip_score"] = clip_score(
            [p[0] for p in pairs], [p[1] for p in pairs], guidance
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    columns = ["method", "fid", "psnr", "ssim", "lpips"] + (
        ["clip_score"] if prompts is not None else []
    )
    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerow({k: aggregate[k] for k in columns})
    with open(out_dir / "per_image.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["file", "psnr", "ssim", "lpips"])
        writer.writeheader()
        writer.writerows(rows)

    header = "| " + " | ".join(c.upper() for c in columns) + " |"
    sep = "|" + "|".join(["---"] * len(columns)) + "|"
    line = "| " + " | ".join(
        aggregate["method"] if c == "method" else f"{aggregate[c]:.4f}" for c in columns
    ) + " |"
    md = "\n".join(
        ["# Colorization quality report", "", header, sep, line, "",
         f"{len(rows)} image pairs; references: `{references_dir}`."]
    )
    (out_dir / "report.md").write_text(md + "\n")

    aggregate["n_pairs"] = len(rows)
    aggregate["per_image"] = rows
    return aggregate
