"""Stage 2: in-context controllable colorization.

Reconstruction first: optimize the rewritten-prompt embedding against the
primary colorized image with the model frozen, then fine-tune the denoiser
with the embedding frozen. Editing is then pure inference: build a target
prompt with color words, interpolate between the optimized and target
embeddings, sample, and spatially align. No gradient steps ever run in the
edit path.
"""

from __future__ import annotations

import dataclasses
import json
import time
import uuid
from pathlib import Path

import numpy as np
import torch

from .align import align_chroma
from .core import (
    ColorImage,
    GrayImage,
    load_gray,
    load_image,
    save_image,
)
from .diffusion import DiffusionBackend, load_checkpoint, save_checkpoint
from .embedding import TextEmbedding
from .errors import (
    DimensionMismatch,
    EtaOutOfRange,
    NonFiniteLoss,
    OverlappingSpans,
    SessionIncomplete,
    UnknownObject,
)
from .guidance import GuidanceBackend, ToyGuidanceBackend
from .instrumentation import gradient_steps
from .stage1 import _check_frozen, sample_primary

IDENTIFIER = "[*]"

DEFAULT_ETA_RANGE = (0.7, 0.975)
DEFAULT_VARIANT_COUNT = 8


# -- prompt rewriting -----------------------------------------------------------------


def _validate_spans(context: str, object_spans) -> list[tuple[int, int]]:
    spans = sorted((int(s), int(e)) for s, e in object_spans)
    prev_end = 0
    for start, end in spans:
        if start < 0 or end > len(context) or start >= end:
            raise OverlappingSpans(
                f"span ({start}, {end}) outside context of length {len(context)}"
            )
        if start < prev_end:
            raise OverlappingSpans(f"span ({start}, {end}) overlaps a previous span")
        prev_end = end
    return spans


def _identifier(index: int, unique: bool) -> str:
    return f"[*{index + 1}]" if unique else IDENTIFIER


def rewrite_prompt(context: str, object_spans, unique_identifiers: bool = False) -> str:
    """Insert the identifier token before each object word, left to right.

    One shared "[*]" by default; unique_identifiers numbers them per object.
    """
    spans = _validate_spans(context, object_spans)
    out = []
    cursor = 0
    for i, (start, end) in enumerate(spans):
        out.append(context[cursor:start])
        out.append(_identifier(i, unique_identifiers) + " ")
        cursor = start
    out.append(context[cursor:])
    return "".join(out)


def build_target_prompt(
    context: str,
    object_spans,
    color_assignments: dict[str, str],
    suffix: str | None = None,
    keep_identifiers: bool = False,
    unique_identifiers: bool = False,
) -> str:
    """Insert color words before their object words in the original context.

    Unassigned objects stay bare. With keep_identifiers the target is built
    on the rewritten prompt instead ("A brown [*] dog ...").
    """
    spans = _validate_spans(context, object_spans)
    words = {context[s:e] for s, e in spans}
    for obj in color_assignments:
        if obj not in words:
            raise UnknownObject(f"object {obj!r} does not match any tagged span")

    out = []
    cursor = 0
    for i, (start, end) in enumerate(spans):
        out.append(context[cursor:start])
        word = context[start:end]
        color = color_assignments.get(word)
        if color:
            out.append(color + " ")
        if keep_identifiers:
            out.append(_identifier(i, unique_identifiers) + " ")
        cursor = start
    out.append(context[cursor:])
    result = "".join(out)
    if suffix:
        result = result + " " + suffix
    return result


@dataclasses.dataclass
class PromptSet:
    """Context prompt plus everything derived from the tagged object words."""

    context: str
    object_spans: list[tuple[int, int]]
    color_assignments: dict[str, str] = dataclasses.field(default_factory=dict)
    suffix: str | None = None
    keep_identifiers: bool = False
    unique_identifiers: bool = False

    def __post_init__(self):
        self.object_spans = _validate_spans(self.context, self.object_spans)

    @property
    def object_words(self) -> list[str]:
        return [self.context[s:e] for s, e in self.object_spans]

    @property
    def rewritten(self) -> str:
        return rewrite_prompt(self.context, self.object_spans, self.unique_identifiers)

    @property
    def target(self) -> str:
        return build_target_prompt(
            self.context,
            self.object_spans,
            self.color_assignments,
            suffix=self.suffix,
            keep_identifiers=self.keep_identifiers,
            unique_identifiers=self.unique_identifiers,
        )

    def with_assignments(
        self, color_assignments: dict[str, str], suffix: str | None = None
    ) -> "PromptSet":
        return dataclasses.replace(
            self,
            color_assignments=dict(color_assignments),
            suffix=self.suffix if suffix is None else suffix,
        )

    def to_dict(self) -> dict:
        return {
            "context": self.context,
            "object_spans": [list(s) for s in self.object_spans],
            "color_assignments": dict(self.color_assignments),
            "suffix": self.suffix,
            "keep_identifiers": self.keep_identifiers,
            "unique_identifiers": self.unique_identifiers,
            "rewritten": self.rewritten,
            "target": self.target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSet":
        return cls(
            context=d["context"],
            object_spans=[tuple(s) for s in d["object_spans"]],
            color_assignments=dict(d.get("color_assignments", {})),
            suffix=d.get("suffix"),
            keep_identifiers=bool(d.get("keep_identifiers", False)),
            unique_identifiers=bool(d.get("unique_identifiers", False)),
        )


# -- embedding interpolation -------------------------------------------------------------


def interpolate(e_opt: TextEmbedding, e_tgt: TextEmbedding, eta: float) -> TextEmbedding:
    """Linear blend: eta * e_tgt + (1 - eta) * e_opt."""
    if e_opt.dim != e_tgt.dim:
        raise DimensionMismatch(f"embedding dims differ: {e_opt.dim} vs {e_tgt.dim}")
    if not 0.0 <= eta <= 1.0:
        raise EtaOutOfRange(f"eta must be in [0, 1], got {eta}")
    if eta == 0.0:
        return e_opt
    if eta == 1.0:
        return e_tgt
    return TextEmbedding(eta * e_tgt.vector + (1.0 - eta) * e_opt.vector)


# -- reconstruction -----------------------------------------------------------------------


@dataclasses.dataclass
class Stage2Config:
    optimize_steps: int = 500
    optimize_lr: float = 1e-3
    finetune_steps: int = 1000
    finetune_lr: float = 1e-6
    sample_steps: int = 50
    seed: int = 0
    # scale of the seeded Gaussian blended into the inverted start latent
    # (variance-preserving); this is what lets the fine-tuned prior act and
    # makes different seeds produce different variants
    seed_noise: float = 0.3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    @classmethod
    def toy(cls, **overrides) -> "Stage2Config":
        base = dict(
            optimize_steps=200,
            optimize_lr=1e-2,
            finetune_steps=300,
            finetune_lr=3e-4,
            sample_steps=20,
            seed=0,
            seed_noise=0.6,
        )
        base.update(overrides)
        return cls(**base)


def optimize_embedding(
    image: ColorImage,
    rewritten_prompt: str,
    backend: DiffusionBackend,
    guidance: GuidanceBackend,
    steps: int = 500,
    lr: float = 1e-3,
    seed: int = 0,
    adam_betas=(0.9, 0.999),
    adam_eps: float = 1e-8,
    on_step=None,
) -> TextEmbedding:
    """Descend the denoising loss w.r.t. the text embedding only.

    All model weights stay frozen; starts from the encoded rewritten prompt.
    """
    start = guidance.encode_text(rewritten_prompt)
    start.require_dim(backend.embedding_dim)
    if steps == 0:
        return start

    e_param = torch.nn.Parameter(backend.to_tensor(start.vector))
    x = backend.to_tensor(image.data).unsqueeze(0)
    with torch.no_grad():
        z0 = backend.encode_t(x)

    required = [p.requires_grad for p in backend.denoiser_parameters()]
    for p in backend.denoiser_parameters():
        p.requires_grad_(False)

    opt = torch.optim.Adam([e_param], lr=lr, betas=adam_betas, eps=adam_eps)
    gen = torch.Generator().manual_seed(seed)
    schedule = backend.schedule
    try:
        for step in range(steps):
            t = int(torch.randint(1, schedule.T + 1, (1,), generator=gen))
            eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
            from .diffusion import ldm_loss_t

            loss = ldm_loss_t(backend, z0, t, eps, e_param.unsqueeze(0))
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"embedding optimization diverged at step {step}",
                    step=step,
                    diagnostics={"loss": float(loss.detach()), "t": t},
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            gradient_steps.increment()
            if on_step:
                on_step({"step": step, "ldm": float(loss.detach())})
    finally:
        for p, req in zip(backend.denoiser_parameters(), required):
            p.requires_grad_(req)

    return TextEmbedding(e_param.detach().double().numpy())


def finetune_for_reconstruction(
    image: ColorImage,
    e_opt: TextEmbedding,
    backend: DiffusionBackend,
    steps: int = 1000,
    lr: float = 1e-6,
    seed: int = 0,
    adam_betas=(0.9, 0.999),
    adam_eps: float = 1e-8,
    on_step=None,
) -> DiffusionBackend:
    """Descend the denoising loss w.r.t. denoiser weights, embedding frozen."""
    e_opt.require_dim(backend.embedding_dim)
    if steps == 0:
        return backend

    emb = backend.to_tensor(e_opt.vector).unsqueeze(0)
    x = backend.to_tensor(image.data).unsqueeze(0)
    with torch.no_grad():
        z0 = backend.encode_t(x)
    for p in backend.frozen_parameters():
        p.requires_grad_(False)

    opt = torch.optim.Adam(backend.denoiser_parameters(), lr=lr, betas=adam_betas, eps=adam_eps)
    gen = torch.Generator().manual_seed(seed + 1)
    schedule = backend.schedule
    from .diffusion import ldm_loss_t

    for step in range(steps):
        t = int(torch.randint(1, schedule.T + 1, (1,), generator=gen))
        eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
        loss = ldm_loss_t(backend, z0, t, eps, emb)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(
                f"reconstruction fine-tune diverged at step {step}",
                step=step,
                diagnostics={"loss": float(loss.detach()), "t": t},
            )
        opt.zero_grad()
        loss.backward()
        _check_frozen(backend)
        opt.step()
        gradient_steps.increment()
        if on_step:
            on_step({"step": step, "ldm": float(loss.detach())})
    return backend


# -- edit sessions ----------------------------------------------------------------------


class EditSession:
    """Persisted reconstruction state enabling cheap re-renders.

    Holds the optimized embedding, the fine-tuned backend, the (quantized)
    grayscale input and prompt set, plus the reconstruction seed so the
    eta=0 render is exactly reproducible.
    """

    def __init__(
        self,
        session_id: str,
        gray: GrayImage,
        primary: ColorImage,
        prompt_set: PromptSet,
        e_opt: TextEmbedding,
        backend: DiffusionBackend,
        guidance: GuidanceBackend,
        config: Stage2Config,
        status: str = "building",
        reconstruction: ColorImage | None = None,
    ):
        self.session_id = session_id
        self.gray = gray
        self.primary = primary
        self.prompt_set = prompt_set
        self.e_opt = e_opt
        self.backend = backend
        self.guidance = guidance
        self.config = config
        self.status = status
        self.reconstruction = reconstruction

    @property
    def recon_seed(self) -> int:
        return self.config.seed

    def require_ready(self) -> None:
        if self.status != "ready" or self.e_opt is None or self.reconstruction is None:
            raise SessionIncomplete(
                f"session {self.session_id} is not ready (status={self.status})"
            )

    # -- persistence -------------------------------------------------------------

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.backend, directory / "checkpoint.ckpt")
        np.save(directory / "e_opt.npy", self.e_opt.vector)
        save_image(self.gray, directory / "gray.png", bit_depth=16)
        save_image(self.primary, directory / "primary.png")
        if self.reconstruction is not None:
            save_image(self.reconstruction, directory / "reconstruction.png")
        manifest = {
            "session_id": self.session_id,
            "status": self.status,
            "prompt_set": self.prompt_set.to_dict(),
            "config": dataclasses.asdict(self.config),
            "guidance": {"kind": "toy", "seed": getattr(self.guidance, "seed", 0),
                         "embedding_dim": self.guidance.embedding_dim},
            "saved_at": time.time(),
        }
        with open(directory / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        with open(directory / "provenance.jsonl", "a") as f:
            f.write(json.dumps({"event": "saved", "status": self.status, "t": time.time()}) + "\n")
        return directory

    @classmethod
    def load(cls, directory, guidance: GuidanceBackend | None = None) -> "EditSession":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise SessionIncomplete(f"{directory} has no session manifest")
        manifest = json.loads(manifest_path.read_text())
        if guidance is None:
            g = manifest.get("guidance", {})
            guidance = ToyGuidanceBackend(
                embedding_dim=g.get("embedding_dim", 32), seed=g.get("seed", 0)
            )
        cfg_dict = dict(manifest["config"])
        cfg_dict["adam_betas"] = tuple(cfg_dict.get("adam_betas", (0.9, 0.999)))
        config = Stage2Config(**cfg_dict)
        backend = load_checkpoint(directory / "checkpoint.ckpt")
        gray = load_gray(directory / "gray.png")
        primary = load_image(directory / "primary.png")
        recon_path = directory / "reconstruction.png"
        reconstruction = load_image(recon_path) if recon_path.exists() else None
        e_opt = TextEmbedding(np.load(directory / "e_opt.npy"))
        if e_opt.dim != backend.embedding_dim:
            raise SessionIncomplete(
                f"stored embedding dim {e_opt.dim} does not match backend "
                f"dim {backend.embedding_dim}"
            )
        return cls(
            session_id=manifest["session_id"],
            gray=gray,
            primary=primary,
            prompt_set=PromptSet.from_dict(manifest["prompt_set"]),
            e_opt=e_opt,
            backend=backend,
            guidance=guidance,
            config=config,
            status=manifest["status"],
            reconstruction=reconstruction,
        )


def quantize_gray(gray: GrayImage) -> GrayImage:
    """Snap to the 16-bit grid used by session persistence (lossless reload)."""
    return GrayImage(np.floor(gray.data * 65535.0 + 0.5) / 65535.0)


def build_session(
    gray: GrayImage,
    primary: ColorImage,
    prompt_set: PromptSet,
    backend: DiffusionBackend,
    guidance: GuidanceBackend,
    config: Stage2Config | None = None,
    session_id: str | None = None,
    on_step=None,
) -> EditSession:
    """Run embedding optimization + reconstruction fine-tune, then freeze.

    Mutates (fine-tunes) the given backend. The returned session is ready
    for edit calls and carries the stored reconstruction render.
    """
    config = config or Stage2Config()
    session_id = session_id or uuid.uuid4().hex[:12]
    gray = quantize_gray(gray)

    session = EditSession(
        session_id=session_id,
        gray=gray,
        primary=primary,
        prompt_set=prompt_set,
        e_opt=None,
        backend=backend,
        guidance=guidance,
        config=config,
        status="building",
    )

    e_opt = optimize_embedding(
        primary,
        prompt_set.rewritten,
        backend,
        guidance,
        steps=config.optimize_steps,
        lr=config.optimize_lr,
        seed=config.seed,
        adam_betas=config.adam_betas,
        adam_eps=config.adam_eps,
        on_step=(lambda rec: on_step({"phase": "optimize_embedding", **rec})) if on_step else None,
    )
    session.e_opt = e_opt

    finetune_for_reconstruction(
        primary,
        e_opt,
        backend,
        steps=config.finetune_steps,
        lr=config.finetune_lr,
        seed=config.seed,
        adam_betas=config.adam_betas,
        adam_eps=config.adam_eps,
        on_step=(lambda rec: on_step({"phase": "finetune", **rec})) if on_step else None,
    )

    session.status = "ready"
    session.reconstruction = _render(session, session.e_opt, config.seed)
    return session


# -- editing ------------------------------------------------------------------------------


def _render(session: EditSession, emb: TextEmbedding, seed: int) -> ColorImage:
    """Shared inference path: invert gray latent, seed-blend, sample, align."""
    backend = session.backend
    emb_t = backend.to_tensor(emb.vector).unsqueeze(0)
    gen = torch.Generator().manual_seed(seed)
    noise = None
    if session.config.seed_noise > 0:
        shape = (1, *backend.latent_shape)
        noise = torch.randn(shape, generator=gen, dtype=backend.dtype)
    img = sample_primary(
        backend,
        session.gray,
        emb_t,
        session.config.sample_steps,
        start_mode="invert",
        seed=seed,
        start_noise=noise,
        start_noise_scale=session.config.seed_noise,
    )
    return align_chroma(session.gray, img)


def edit(
    session: EditSession,
    eta: float,
    seed: int,
    color_assignments: dict[str, str] | None = None,
    suffix: str | None = None,
) -> ColorImage:
    """One edit render; pure inference, zero optimization steps.

    The target prompt comes from the session's prompt set, overridden by
    color_assignments when given. Deterministic in (session, eta, seed).
    """
    session.require_ready()
    if not 0.0 <= eta <= 1.0:
        raise EtaOutOfRange(f"eta must be in [0, 1], got {eta}")

    prompt_set = session.prompt_set
    if color_assignments is not None or suffix is not None:
        prompt_set = prompt_set.with_assignments(
            color_assignments if color_assignments is not None else prompt_set.color_assignments,
            suffix=suffix,
        )
    e_tgt = session.guidance.encode_text(prompt_set.target)
    e_bar = interpolate(session.e_opt, e_tgt, eta)
    return _render(session, e_bar, seed)


def default_eta_grid(count: int = DEFAULT_VARIANT_COUNT) -> list[float]:
    lo, hi = DEFAULT_ETA_RANGE
    if count == 1:
        return [lo]
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def generate_variants(
    session: EditSession,
    count: int = DEFAULT_VARIANT_COUNT,
    eta_grid: list[float] | None = None,
    seeds: list[int] | None = None,
    color_assignments: dict[str, str] | None = None,
) -> list[tuple[float, int, ColorImage]]:
    """Batch of independent edit calls over an eta grid; deterministic order."""
    if count < 1:
        raise ValueError("count must be >= 1")
    etas = eta_grid if eta_grid is not None else default_eta_grid(count)
    if len(etas) != count:
        raise ValueError(f"eta grid has {len(etas)} entries for count={count}")
    if seeds is None:
        seeds = [session.recon_seed + 1 + i for i in range(count)]
    if len(seeds) != count:
        raise ValueError(f"seed list has {len(seeds)} entries for count={count}")
    return [
        (eta, seed, edit(session, eta, seed, color_assignments=color_assignments))
        for eta, seed in zip(etas, seeds)
    ]
