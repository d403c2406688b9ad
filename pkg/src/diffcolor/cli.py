"""Command-line front door for batch and scripted colorization runs.

Exit codes: 0 success, 2 validation error, 3 non-finite training loss,
4 incomplete edit session. The DIFFCOLOR_BACKEND env var selects the
diffusion backend ("toy" is the default and the only bundled one).
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib
from pathlib import Path

import click

from . import __version__
from .align import align_chroma
from .core import load_gray, load_image, save_image
from .diffusion import build_toy_backend
from .errors import (
    DiffColorError,
    MissingPair,
    NonFiniteLoss,
    SessionIncomplete,
    UnknownObject,
)
from .guidance import NegativePromptSet, ToyGuidanceBackend
from .metrics import run_report
from .stage1 import Stage1Config, colorize_stage1
from .stage2 import (
    EditSession,
    PromptSet,
    Stage2Config,
    build_session,
    edit,
    generate_variants,
)

EXIT_VALIDATION = 2
EXIT_NONFINITE = 3
EXIT_SESSION = 4


def _load_config_file(path) -> dict:
    """TOML config with a JSON fallback; returns {} when path is None."""
    if not path:
        return {}
    raw = Path(path).read_bytes()
    try:
        return tomllib.loads(raw.decode())
    except tomllib.TOMLDecodeError:
        try:
            return json.loads(raw.decode())
        except json.JSONDecodeError:
            raise click.UsageError(f"config file {path} is neither TOML nor JSON")


def _get_backend():
    """The run seed governs training; the pre-trained backend build is fixed."""
    kind = os.environ.get("DIFFCOLOR_BACKEND", "toy")
    if kind != "toy":
        raise click.UsageError(
            f"unknown backend {kind!r}; set DIFFCOLOR_BACKEND=toy or install an adapter"
        )
    return build_toy_backend(seed=0), ToyGuidanceBackend()


def _stage1_config(file_cfg: dict, seed: int | None, steps: int | None) -> Stage1Config:
    params = dict(file_cfg.get("stage1", {}))
    if seed is not None:
        params["seed"] = seed
    if steps is not None:
        params["steps"] = steps
    try:
        return Stage1Config.toy(**params)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"bad stage1 config: {exc}")


def _stage2_config(file_cfg: dict, seed: int | None) -> Stage2Config:
    params = dict(file_cfg.get("stage2", {}))
    if seed is not None:
        params["seed"] = seed
    try:
        return Stage2Config.toy(**params)
    except TypeError as exc:
        raise click.UsageError(f"bad stage2 config: {exc}")


def _echo_effective_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "effective_config.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _find_spans(prompt: str, objects: list[str]) -> list[tuple[int, int]]:
    spans = []
    for obj in objects:
        idx = prompt.find(obj)
        if idx < 0:
            raise click.UsageError(f"object {obj!r} not found in prompt")
        spans.append((idx, idx + len(obj)))
    return spans


def _parse_colors(spec: str) -> dict[str, str]:
    assignments = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise click.UsageError(f"bad color assignment {part!r}; expected object=color")
        obj, color = part.split("=", 1)
        assignments[obj.strip()] = color.strip()
    return assignments


@click.group()
@click.version_option(__version__)
def main():
    """Text-guided diffusion colorization toolkit."""


@main.command()
@click.option("--gray", "gray_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--prompt", required=True, help="Context text describing the image content.")
@click.option("--negatives", "negatives_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--steps", type=int, default=None, help="Override fine-tune step count.")
def colorize(gray_path, prompt, negatives_path, config_path, out_dir, seed, steps):
    """Stage 1: fine-tune on one grayscale image and emit the colorized pair."""
    if not prompt.strip():
        raise click.UsageError("--prompt must be non-empty")
    out_dir = Path(out_dir)
    file_cfg = _load_config_file(config_path)
    cfg = _stage1_config(file_cfg, seed, steps)
    negatives = (
        NegativePromptSet.from_json(negatives_path)
        if negatives_path
        else NegativePromptSet.default()
    )
    gray = load_gray(gray_path)
    backend, guidance = _get_backend()

    _echo_effective_config(
        out_dir,
        {
            "command": "colorize",
            "stage1": dataclasses.asdict(cfg),
            "negatives": negatives.prompts,
            "backend": backend.config(),
            "gray": str(gray_path),
            "prompt": prompt,
        },
    )

    log_path = out_dir / "training_log.jsonl"
    try:
        with open(log_path, "w") as log_file:
            x_pri, _, _ = colorize_stage1(
                gray,
                prompt,
                negatives,
                cfg,
                backend,
                guidance,
                on_step=lambda rec: log_file.write(json.dumps(rec) + "\n"),
            )
    except NonFiniteLoss as exc:
        click.echo(f"error: {exc} (diagnostics: {exc.diagnostics})", err=True)
        sys.exit(EXIT_NONFINITE)

    aligned = align_chroma(gray, x_pri)
    save_image(x_pri, out_dir / "x_pri.png")
    save_image(aligned, out_dir / "x_pri_aligned.png")
    manifest = {
        "prompt": prompt,
        "negatives": negatives.prompts,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "artifacts": ["x_pri.png", "x_pri_aligned.png", "training_log.jsonl"],
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    click.echo(f"wrote {out_dir}/x_pri_aligned.png")


@main.group(name="edit-session")
def edit_session():
    """Stage 2: build and render in-context edit sessions."""


@edit_session.command()
@click.option("--image", "image_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Primary colorized image to reconstruct.")
@click.option("--gray", "gray_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--prompt", required=True)
@click.option("--objects", required=True, help='Comma-separated object words, e.g. "dog,wooden bench".')
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "session_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
def build(image_path, gray_path, prompt, objects, config_path, session_dir, seed):
    """Optimize the embedding, fine-tune for reconstruction, persist the session."""
    session_dir = Path(session_dir)
    file_cfg = _load_config_file(config_path)
    cfg = _stage2_config(file_cfg, seed)
    object_list = [o.strip() for o in objects.split(",") if o.strip()]
    if not object_list:
        raise click.UsageError("--objects must name at least one object word")
    spans = _find_spans(prompt, object_list)
    try:
        prompt_set = PromptSet(context=prompt, object_spans=spans)
    except DiffColorError as exc:
        raise click.UsageError(str(exc))

    gray = load_gray(gray_path)
    primary = load_image(image_path)
    backend, guidance = _get_backend()

    _echo_effective_config(
        session_dir,
        {
            "command": "edit-session build",
            "stage2": dataclasses.asdict(cfg),
            "backend": backend.config(),
            "prompt_set": prompt_set.to_dict(),
        },
    )

    try:
        session = build_session(gray, primary, prompt_set, backend, guidance, cfg)
    except NonFiniteLoss as exc:
        click.echo(f"error: {exc} (diagnostics: {exc.diagnostics})", err=True)
        sys.exit(EXIT_NONFINITE)
    session.save(session_dir)
    click.echo(f"session {session.session_id} ready at {session_dir}")


@edit_session.command()
@click.option("--session", "session_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--colors", default="", help='Color words per object, e.g. "dog=brown,bench=purple".')
@click.option("--eta", type=float, default=0.85, show_default=True)
@click.option("--seed", type=int, default=None, help="Defaults to the stored reconstruction seed.")
@click.option("--suffix", default=None, help="Extra text appended to the target prompt.")
@click.option("--variants", "n_variants", type=int, default=0,
              help="Render this many variants over the default eta grid instead.")
@click.option("--out", "out_path", type=click.Path(), default=None)
def render(session_dir, colors, eta, seed, suffix, n_variants, out_path):
    """Render edits from a stored session; pure inference, no optimization."""
    try:
        session = EditSession.load(session_dir)
        session.require_ready()
    except SessionIncomplete as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_SESSION)

    assignments = _parse_colors(colors) if colors else None
    seed = session.recon_seed if seed is None else seed
    out_dir = Path(out_path) if out_path else Path(session_dir) / "renders"

    try:
        if n_variants > 0:
            results = generate_variants(
                session, count=n_variants, color_assignments=assignments
            )
            out_dir.mkdir(parents=True, exist_ok=True)
            for v_eta, v_seed, img in results:
                name = f"variant_eta{v_eta:.3f}_seed{v_seed}.png"
                save_image(img, out_dir / name)
            click.echo(f"wrote {len(results)} variants to {out_dir}")
        else:
            img = edit(session, eta, seed, color_assignments=assignments, suffix=suffix)
            if out_path and Path(out_path).suffix == ".png":
                target = Path(out_path)
            else:
                target = out_dir / f"edit_eta{eta:.3f}_seed{seed}.png"
            save_image(img, target)
            click.echo(f"wrote {target}")
    except UnknownObject as exc:
        raise click.UsageError(str(exc))
    except SessionIncomplete as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_SESSION)


@main.command(name="eval")
@click.option("--outputs", "outputs_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--refs", "refs_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--prompts", "prompts_file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
def eval_cmd(outputs_dir, refs_dir, prompts_file, out_dir):
    """Batch metric report (FID/PSNR/SSIM/LPIPS, +CLIP score with prompts)."""
    try:
        report = run_report(outputs_dir, refs_dir, prompts_file=prompts_file, out_dir=out_dir)
    except MissingPair as exc:
        raise click.UsageError(str(exc))
    cols = ["fid", "psnr", "ssim", "lpips"] + (["clip_score"] if prompts_file else [])
    summary = "  ".join(f"{c}={report[c]:.4f}" for c in cols)
    click.echo(f"{report['method']}: {summary} ({report['n_pairs']} pairs)")


if __name__ == "__main__":
    main()
