"""Contrastive color guidance: encoder contracts, losses, negative prompts.

The contrastive loss follows the softmax-over-dot-products form: the image
embedding should score high against the context text and low against every
anti-color ("negative") text. Logits are raw dot products by default; a
cosine/temperature mode exists for adapter backends whose embedding norms
are large.
"""

from __future__ import annotations

import abc
import hashlib
import json
import re
from importlib import resources

import numpy as np
import torch

from .core import ColorImage
from .embedding import TextEmbedding
from .errors import DimensionMismatch, EmptyNegatives, ZeroVector

DEFAULT_NEGATIVE_PROMPTS = (
    "A grayscale photograph.",
    "A picture with scratches.",
)


# -- losses -----------------------------------------------------------------------


def contrastive_loss_t(
    e: torch.Tensor,
    e_plus: torch.Tensor,
    negatives: list[torch.Tensor] | torch.Tensor,
    normalize: bool = False,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Softmax cross-entropy over [positive, negatives] logits, positive first.

    loss = -log( exp(e.e+) / (exp(e.e+) + sum_i exp(e.e-_i)) )
    """
    if isinstance(negatives, (list, tuple)):
        if len(negatives) == 0:
            raise EmptyNegatives("need at least one negative embedding")
        negatives = torch.stack(list(negatives))
    if negatives.ndim != 2 or negatives.shape[0] < 1:
        raise EmptyNegatives("need at least one negative embedding")
    if e.shape != e_plus.shape or negatives.shape[1] != e.shape[0]:
        raise DimensionMismatch(
            f"dims differ: e {tuple(e.shape)}, e+ {tuple(e_plus.shape)}, "
            f"negatives {tuple(negatives.shape)}"
        )
    if normalize:
        e = e / e.norm()
        e_plus = e_plus / e_plus.norm()
        negatives = negatives / negatives.norm(dim=1, keepdim=True)
    pos = (e * e_plus).sum() / temperature
    neg = negatives @ e / temperature
    logits = torch.cat([pos.reshape(1), neg])
    return torch.logsumexp(logits, dim=0) - pos


def contrastive_loss(
    e, e_plus, negatives, normalize: bool = False, temperature: float = 1.0
) -> float:
    e_t = torch.as_tensor(np.asarray(e, dtype=np.float64))
    p_t = torch.as_tensor(np.asarray(e_plus, dtype=np.float64))
    negs = [torch.as_tensor(np.asarray(n, dtype=np.float64)) for n in negatives]
    with torch.no_grad():
        return float(contrastive_loss_t(e_t, p_t, negs, normalize, temperature))


def contrastive_loss_grad(e, e_plus, negatives) -> np.ndarray:
    """Analytic gradient of the raw-logit loss w.r.t. the image embedding e.

    With p = softmax([e.e+, e.e-_1, ...]): dL/de = -e+ + sum_k p_k v_k.
    """
    e = np.asarray(e, dtype=np.float64)
    vs = np.stack([np.asarray(e_plus, dtype=np.float64)] + [np.asarray(n, dtype=np.float64) for n in negatives])
    logits = vs @ e
    logits = logits - logits.max()
    p = np.exp(logits)
    p /= p.sum()
    return -vs[0] + p @ vs


def combined_loss(ldm: float, cst: float, lam: float) -> float:
    """Weighted training objective: ldm + lam * cst."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if not (np.isfinite(ldm) and np.isfinite(cst)):
        raise ValueError("loss terms must be finite")
    return float(ldm + lam * cst)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cannot take cosine of a zero-norm embedding")
    return float(np.dot(a, b) / (na * nb))


def image_text_alignment(img: ColorImage, prompt: str, backend: "GuidanceBackend") -> float:
    """Cosine similarity between the image embedding and the prompt embedding."""
    e_img = backend.encode_image(img)
    e_txt = backend.encode_text(prompt).vector
    return cosine_similarity(e_img, e_txt)


# -- encoder contract ----------------------------------------------------------------


class GuidanceBackend(abc.ABC):
    """Deterministic text/image encoder pair sharing one embedding dimension."""

    embedding_dim: int

    @abc.abstractmethod
    def encode_text(self, prompt: str) -> TextEmbedding: ...

    @abc.abstractmethod
    def encode_image_t(self, x: torch.Tensor) -> torch.Tensor:
        """Image tensor (3,H,W) in [0,1] to embedding; differentiable."""

    def encode_image(self, img: ColorImage) -> np.ndarray:
        x = torch.from_numpy(np.array(img.data))
        with torch.no_grad():
            return self.encode_image_t(x).double().numpy()


_TOKEN_RE = re.compile(r"\[\*\d*\]|[a-z0-9]+")


def _stable_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "little")


class ToyGuidanceBackend(GuidanceBackend):
    """Seeded stand-in for a pretrained text/image encoder pair.

    Text: token-hash bag-of-words through a fixed random linear map.
    Image: soft color histograms and channel statistics through a second
    fixed map — differentiable w.r.t. the image and sensitive to whether an
    image carries color at all (R=G=B collapses the difference features).
    """

    VOCAB_DIM = 256
    HIST_BINS = 8

    def __init__(self, embedding_dim: int = 32, seed: int = 0):
        self.embedding_dim = embedding_dim
        self.seed = int(seed)
        rng = np.random.Generator(np.random.PCG64(self.seed + 77))
        self._text_map = rng.standard_normal((embedding_dim, self.VOCAB_DIM)) / np.sqrt(
            self.VOCAB_DIM
        )
        n_feat = 3 * self.HIST_BINS + 3 * self.HIST_BINS + 6 + 3
        img_map = rng.standard_normal((embedding_dim, n_feat)) / np.sqrt(n_feat)
        self._image_map = torch.from_numpy(img_map)
        centers = (np.arange(self.HIST_BINS) + 0.5) / self.HIST_BINS
        self._bin_centers = torch.from_numpy(centers)

    def encode_text(self, prompt: str) -> TextEmbedding:
        tokens = _TOKEN_RE.findall(prompt.lower())
        bow = np.zeros(self.VOCAB_DIM)
        for tok in tokens:
            h = _stable_hash(tok)
            sign = 1.0 if (h >> 32) & 1 else -1.0
            bow[h % self.VOCAB_DIM] += sign
        scale = max(1.0, np.sqrt(len(tokens)))
        return TextEmbedding(self._text_map @ bow / scale)

    def _soft_hist(self, v: torch.Tensor, spread: float) -> torch.Tensor:
        # v: flat values; soft-assign to bins with a Gaussian kernel
        d = v[:, None] - self._bin_centers[None, :].to(v.dtype)
        w = torch.exp(-(d**2) / (2.0 * spread**2))
        return w.mean(dim=0)

    def encode_image_t(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[0] != 3:
            raise DimensionMismatch(f"expected (3,H,W) image tensor, got {tuple(x.shape)}")
        r, g, b = x[0].reshape(-1), x[1].reshape(-1), x[2].reshape(-1)
        spread = 1.0 / self.HIST_BINS
        feats = [self._soft_hist(c, spread) for c in (r, g, b)]
        # opponent-channel histograms: zero out for channel-equal (gray) images
        for d in (r - g, r - b, g - b):
            feats.append(self._soft_hist(d + 0.5, spread))
        stats = torch.stack(
            [
                r.mean(),
                g.mean(),
                b.mean(),
                r.std(),
                g.std(),
                b.std(),
                (r - g).abs().mean(),
                (r - b).abs().mean(),
                (g - b).abs().mean(),
            ]
        )
        f = torch.cat(feats + [stats])
        return self._image_map.to(f.dtype) @ f


# -- negative prompt registry ----------------------------------------------------------


class NegativePromptSet:
    """Ordered anti-color prompts with per-backend embedding caching."""

    def __init__(self, prompts):
        prompts = list(prompts)
        if len(prompts) < 1:
            raise EmptyNegatives("need at least one negative prompt")
        self.prompts = prompts
        self._cache: dict[int, list[TextEmbedding]] = {}

    def __len__(self) -> int:
        return len(self.prompts)

    def embeddings(self, backend: GuidanceBackend) -> list[TextEmbedding]:
        key = id(backend)
        if key not in self._cache:
            self._cache[key] = [backend.encode_text(p) for p in self.prompts]
        return self._cache[key]

    @classmethod
    def default(cls) -> "NegativePromptSet":
        try:
            raw = resources.files("diffcolor.data").joinpath("negative_prompts.json").read_text()
            return cls(json.loads(raw))
        except (FileNotFoundError, ModuleNotFoundError):
            return cls(DEFAULT_NEGATIVE_PROMPTS)

    @classmethod
    def from_json(cls, path) -> "NegativePromptSet":
        with open(path) as f:
            prompts = json.load(f)
        if not isinstance(prompts, list) or not all(isinstance(p, str) for p in prompts):
            raise ValueError("negative prompts file must be a JSON list of strings")
        return cls(prompts)
