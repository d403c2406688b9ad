"""Latent container, the pluggable diffusion backend contract, and checkpoint I/O.

A backend bundles the latent autoencoder (encode/decode), the conditional
denoiser, and its noise schedule. The numpy-facing methods are the public
contract; torch-facing `*_t` methods exist so the training loops can
differentiate through a backend without leaving torch.

Checkpoints are a single binary file: magic, a canonical-JSON header
(version tag, backend config, schedule parameters, tensor shape table,
payload checksum), then raw little-endian tensor bytes.
"""

from __future__ import annotations

import abc
import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..core import ColorImage
from ..embedding import TextEmbedding
from ..errors import ChecksumMismatch, ShapeMismatch
from .schedule import NoiseSchedule, make_schedule

_MAGIC = b"DCCK"
_FORMAT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class Latent:
    """Backend latent tensor, C x h x w float64."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"latent must be CxHxW, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("latent contains non-finite values")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def require_shape(self, shape) -> None:
        if self.shape != tuple(shape):
            raise ShapeMismatch(f"latent shape {self.shape} != expected {tuple(shape)}")


class DiffusionBackend(abc.ABC):
    """Contract every diffusion backend satisfies.

    Attributes:
        latent_shape: (C, h, w) of the latent space.
        embedding_dim: conditioning vector length.
        schedule: the backend's noise schedule.
        dtype: torch dtype the backend computes in.
        reconstruction_psnr_floor: declared decode(encode(x)) PSNR floor in dB.
        inversion_tolerance: declared inf-norm bound for invert->sample roundtrip.
    """

    latent_shape: tuple[int, int, int]
    embedding_dim: int
    schedule: NoiseSchedule
    dtype: torch.dtype = torch.float64
    reconstruction_psnr_floor: float
    inversion_tolerance: float

    def to_tensor(self, arr: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.array(arr)).to(self.dtype)

    # -- numpy-facing contract -------------------------------------------------

    def encode(self, img: ColorImage) -> Latent:
        x = self.to_tensor(img.data)
        with torch.no_grad():
            z = self.encode_t(x.unsqueeze(0))[0]
        return Latent(z.double().numpy())

    def decode(self, z: Latent) -> ColorImage:
        zt = self.to_tensor(z.data)
        with torch.no_grad():
            x = self.decode_t(zt.unsqueeze(0))[0]
        return ColorImage(np.clip(x.double().numpy(), 0.0, 1.0))

    def denoise(self, z_t: Latent, t: int, emb: TextEmbedding) -> Latent:
        z_t.require_shape(self.latent_shape)
        emb.require_dim(self.embedding_dim)
        zt = self.to_tensor(z_t.data)
        e = self.to_tensor(emb.vector)
        with torch.no_grad():
            eps = self.denoise_t(zt.unsqueeze(0), t, e.unsqueeze(0))[0]
        return Latent(eps.double().numpy())

    # -- torch-facing internals ------------------------------------------------

    @abc.abstractmethod
    def encode_t(self, x: torch.Tensor) -> torch.Tensor:
        """Batched image tensor (B,3,H,W) to latent (B,C,h,w)."""

    @abc.abstractmethod
    def decode_t(self, z: torch.Tensor) -> torch.Tensor:
        """Batched latent to image tensor; differentiable."""

    @abc.abstractmethod
    def denoise_t(self, z_t: torch.Tensor, t: int, emb: torch.Tensor) -> torch.Tensor:
        """Noise prediction for (B,C,h,w) at timestep t, conditioned on emb (B,D)."""

    @abc.abstractmethod
    def denoiser_parameters(self) -> list[torch.nn.Parameter]:
        """The trainable handle: parameters fine-tuning is allowed to touch."""

    @abc.abstractmethod
    def frozen_parameters(self) -> list[torch.nn.Parameter]:
        """Encoder/decoder parameters that must never receive updates."""

    @abc.abstractmethod
    def named_tensors(self) -> dict[str, torch.Tensor]:
        """All weights/buffers under stable names, for serialization."""

    @abc.abstractmethod
    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        """Inverse of named_tensors."""

    @abc.abstractmethod
    def config(self) -> dict:
        """JSON-serializable constructor arguments (backend identity)."""

    @abc.abstractmethod
    def clone(self) -> "DiffusionBackend":
        """Independent deep copy; training a clone leaves the original intact."""


# -- checkpoint serialization ---------------------------------------------------

_BACKEND_REGISTRY: dict[str, callable] = {}


def register_backend(name: str, factory) -> None:
    """factory(config: dict) -> DiffusionBackend with freshly built modules."""
    _BACKEND_REGISTRY[name] = factory


def save_checkpoint(backend: DiffusionBackend, path) -> Path:
    """Write the backend to a single binary checkpoint file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    tensors = backend.named_tensors()
    names = sorted(tensors)
    payload = bytearray()
    table = []
    for name in names:
        arr = tensors[name].detach().cpu().numpy()
        wire = "<f4" if arr.dtype == np.float32 else "<f8"
        arr = arr.astype(wire)
        raw = arr.tobytes()
        table.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "float32" if wire == "<f4" else "float64",
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    payload = bytes(payload)

    header = {
        "format_version": _FORMAT_VERSION,
        "backend": backend.config()["name"],
        "backend_config": backend.config(),
        "schedule": backend.schedule.params(),
        "latent_shape": list(backend.latent_shape),
        "embedding_dim": backend.embedding_dim,
        "tensors": table,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(hashlib.sha256(header_bytes).digest())
        f.write(header_bytes)
        f.write(payload)
    return path


def load_checkpoint(path) -> DiffusionBackend:
    """Reconstruct a backend from a checkpoint file.

    Raises ChecksumMismatch for a corrupted header or payload.
    """
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != _MAGIC:
        raise ChecksumMismatch(f"{path}: bad magic, not a checkpoint file")
    try:
        (header_len,) = struct.unpack("<Q", blob[4:12])
        header_digest = blob[12:44]
        header_bytes = blob[44 : 44 + header_len]
        if hashlib.sha256(header_bytes).digest() != header_digest:
            raise ChecksumMismatch(f"{path}: corrupted header")
        header = json.loads(header_bytes.decode())
    except ChecksumMismatch:
        raise
    except Exception as exc:
        raise ChecksumMismatch(f"{path}: corrupted header ({exc})") from exc

    payload = blob[44 + header_len :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise ChecksumMismatch(f"{path}: payload checksum mismatch")
    if header.get("format_version") != _FORMAT_VERSION:
        raise ChecksumMismatch(
            f"{path}: unsupported checkpoint version {header.get('format_version')}"
        )

    name = header["backend"]
    if name not in _BACKEND_REGISTRY:
        raise ChecksumMismatch(f"{path}: unknown backend {name!r}")
    backend = _BACKEND_REGISTRY[name](header["backend_config"])

    tensors = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        wire = "<f4" if entry["dtype"] == "float32" else "<f8"
        arr = np.frombuffer(payload[start : start + n], dtype=wire).reshape(
            entry["shape"]
        )
        tensors[entry["name"]] = arr.copy()
    backend.load_tensors(tensors)
    return backend


def schedule_from_params(params: dict) -> NoiseSchedule:
    return make_schedule(
        T=params["T"],
        beta_start=params["beta_start"],
        beta_end=params["beta_end"],
        kind=params["kind"],
    )
