"""HTTP job/session API powering the interactive editing UI.

Long-running builds (stage-1 fine-tune, stage-2 session construction) run
as jobs on a worker pool with server-sent progress events; renders are
synchronous, read-only over checkpointed weights, and perform zero
optimization steps. Artifacts live under a content-addressed data
directory and are served statically under /api/artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import os
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.responses import FileResponse, Response, StreamingResponse
from PIL import Image

from .align import align_chroma
from .core import ColorImage, load_gray, load_image, save_image
from .diffusion import build_toy_backend
from .errors import (
    EtaOutOfRange,
    OverlappingSpans,
    SessionIncomplete,
    UnknownObject,
)
from .guidance import NegativePromptSet, ToyGuidanceBackend
from .stage1 import Stage1Config, colorize_stage1
from .stage2 import (
    EditSession,
    PromptSet,
    Stage2Config,
    build_session,
    default_eta_grid,
    edit,
)

EVENT_BUCKET = 10  # one SSE event per this many training steps


@dataclasses.dataclass
class Job:
    job_id: str
    kind: str
    status: str = "queued"  # queued -> running -> done | failed
    progress: float = 0.0
    step: int = 0
    total: int = 0
    result: dict | None = None
    error: str | None = None

    def snapshot(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "status": self.status,
            "progress": self.progress,
            "step": self.step,
            "total": self.total,
            "result": self.result,
            "error": self.error,
        }


class JobRegistry:
    """In-process job table with ordered progress events for SSE replay."""

    def __init__(self):
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._jobs: dict[str, Job] = {}
        self._events: dict[str, list[dict]] = {}

    def create(self, kind: str, total: int) -> Job:
        job = Job(job_id=uuid.uuid4().hex[:12], kind=kind, total=total)
        with self._lock:
            self._jobs[job.job_id] = job
            self._events[job.job_id] = []
        return job

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            return self._jobs.get(job_id)

    def push_event(self, job_id: str, event: dict) -> None:
        with self._cond:
            job = self._jobs[job_id]
            job.step = max(job.step, int(event.get("step", job.step)))
            if job.total:
                job.progress = max(job.progress, min(job.step / job.total, 1.0))
            self._events[job_id].append(event)
            self._cond.notify_all()

    def finish(self, job_id: str, result: dict | None = None, error: str | None = None) -> None:
        with self._cond:
            job = self._jobs[job_id]
            job.status = "failed" if error else "done"
            job.error = error
            job.result = result
            if not error:
                job.progress = 1.0
            self._events[job_id].append(
                {"event": "end", "status": job.status, "error": error}
            )
            self._cond.notify_all()

    def mark_running(self, job_id: str) -> None:
        with self._cond:
            self._jobs[job_id].status = "running"
            self._cond.notify_all()

    def stream(self, job_id: str):
        """Yield SSE frames: replay existing events, then follow until end."""
        index = 0
        while True:
            with self._cond:
                events = self._events[job_id]
                while index >= len(events):
                    job = self._jobs[job_id]
                    if job.status in ("done", "failed") and index >= len(events):
                        return
                    self._cond.wait(timeout=0.5)
                    events = self._events[job_id]
                batch = events[index:]
                index = len(events)
            for event in batch:
                yield f"data: {json.dumps(event)}\n\n"
                if event.get("event") == "end":
                    return


class ServiceState:
    def __init__(
        self,
        data_dir: Path,
        backend_seed: int = 0,
        stage1_defaults: Stage1Config | None = None,
        stage2_defaults: Stage2Config | None = None,
    ):
        self.data_dir = Path(data_dir)
        (self.data_dir / "artifacts").mkdir(parents=True, exist_ok=True)
        (self.data_dir / "sessions").mkdir(parents=True, exist_ok=True)
        self.base_backend = build_toy_backend(seed=backend_seed)
        self.guidance = ToyGuidanceBackend()
        self.negatives = NegativePromptSet.default()
        self.stage1_defaults = stage1_defaults or Stage1Config.toy()
        self.stage2_defaults = stage2_defaults or Stage2Config.toy()
        self.jobs = JobRegistry()
        self.sessions: dict[str, EditSession] = {}
        self.session_status: dict[str, str] = {}
        self.session_locks: dict[str, threading.Lock] = {}
        self.pool = ThreadPoolExecutor(max_workers=2, thread_name_prefix="train")

    # -- artifacts -------------------------------------------------------------

    def store_bytes(self, blob: bytes, suffix: str = ".png") -> str:
        ref = hashlib.sha256(blob).hexdigest()[:16] + suffix
        path = self.data_dir / "artifacts" / ref
        if not path.exists():
            path.write_bytes(blob)
        return ref

    def store_image(self, img, bit_depth: int = 8) -> str:
        buf = io.BytesIO()
        tmp = self.data_dir / "artifacts" / f"tmp-{uuid.uuid4().hex}.png"
        save_image(img, tmp, bit_depth=bit_depth)
        blob = tmp.read_bytes()
        tmp.unlink()
        return self.store_bytes(blob)

    def artifact_path(self, ref: str) -> Path:
        path = (self.data_dir / "artifacts" / ref).resolve()
        if not str(path).startswith(str((self.data_dir / "artifacts").resolve())):
            raise HTTPException(404, "unknown artifact")
        return path


def _png_bytes(img: ColorImage) -> bytes:
    q = np.floor(img.data * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def create_app(
    data_dir=None,
    backend_seed: int = 0,
    stage1_defaults: Stage1Config | None = None,
    stage2_defaults: Stage2Config | None = None,
) -> FastAPI:
    data_dir = Path(data_dir or os.environ.get("DIFFCOLOR_DATA_DIR", "./diffcolor-data"))
    state = ServiceState(data_dir, backend_seed, stage1_defaults, stage2_defaults)
    app = FastAPI(title="diffcolor service")
    app.state.service = state

    # the editing UI is served from a separate origin during development
    from fastapi.middleware.cors import CORSMiddleware

    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    # -- uploads and artifacts --------------------------------------------------

    @app.post("/api/uploads")
    async def upload(file: UploadFile = File(...)):
        blob = await file.read()
        try:
            Image.open(io.BytesIO(blob)).verify()
        except Exception:
            raise HTTPException(422, "not a readable image")
        ref = state.store_bytes(blob)
        return {"ref": ref, "url": f"/api/artifacts/{ref}"}

    @app.get("/api/artifacts/{ref}")
    def artifact(ref: str):
        path = state.artifact_path(ref)
        if not path.exists():
            raise HTTPException(404, "unknown artifact")
        return FileResponse(path, media_type="image/png")

    # -- prompt echo (single source of truth for the UI preview) ----------------

    @app.post("/api/prompts/rewrite")
    def rewrite(body: dict):
        context = body.get("context", "")
        spans = [tuple(s) for s in body.get("object_spans", [])]
        assignments = body.get("color_assignments") or {}
        try:
            ps = PromptSet(context=context, object_spans=spans,
                           color_assignments=assignments, suffix=body.get("suffix"))
            return {"rewritten": ps.rewritten, "target": ps.target}
        except (OverlappingSpans, UnknownObject) as exc:
            raise HTTPException(422, str(exc))

    # -- jobs --------------------------------------------------------------------

    @app.post("/api/jobs/stage1")
    async def submit_stage1(
        gray: UploadFile = File(...),
        prompt: str = Form(...),
        negatives: str = Form(None),
        config: str = Form(None),
    ):
        if not prompt.strip():
            raise HTTPException(422, "prompt must be non-empty")
        blob = await gray.read()
        gray_ref = state.store_bytes(blob)
        overrides = json.loads(config) if config else {}
        try:
            cfg = dataclasses.replace(state.stage1_defaults, **overrides)
        except TypeError as exc:
            raise HTTPException(422, f"bad config: {exc}")
        neg = (
            NegativePromptSet(json.loads(negatives)) if negatives else state.negatives
        )
        job = state.jobs.create("stage1", total=cfg.steps)

        def run():
            state.jobs.mark_running(job.job_id)
            try:
                gray_img = load_gray(state.artifact_path(gray_ref))
                backend = state.base_backend.clone()

                def on_step(rec):
                    if rec["step"] % EVENT_BUCKET == 0 or rec["step"] == cfg.steps - 1:
                        state.jobs.push_event(job.job_id, rec)

                x_pri, _, _ = colorize_stage1(
                    gray_img, prompt, neg, cfg, backend, state.guidance, on_step=on_step
                )
                aligned = align_chroma(gray_img, x_pri)
                result = {
                    "gray_ref": gray_ref,
                    "primary_ref": state.store_image(x_pri),
                    "aligned_ref": state.store_image(aligned),
                    "prompt": prompt,
                }
                state.jobs.finish(job.job_id, result=result)
            except Exception as exc:  # surfaced through the job record
                state.jobs.finish(job.job_id, error=f"{type(exc).__name__}: {exc}")

        state.pool.submit(run)
        return {"job_id": job.job_id}

    @app.post("/api/jobs/session")
    def submit_session(body: dict):
        for field in ("image_ref", "gray_ref", "prompt"):
            if not body.get(field):
                raise HTTPException(422, f"missing field {field}")
        spans = [tuple(s) for s in body.get("object_spans", [])]
        try:
            prompt_set = PromptSet(context=body["prompt"], object_spans=spans)
        except OverlappingSpans as exc:
            raise HTTPException(422, str(exc))
        overrides = body.get("config") or {}
        try:
            cfg = dataclasses.replace(state.stage2_defaults, **overrides)
        except TypeError as exc:
            raise HTTPException(422, f"bad config: {exc}")

        image_path = state.artifact_path(body["image_ref"])
        gray_path = state.artifact_path(body["gray_ref"])
        if not image_path.exists() or not gray_path.exists():
            raise HTTPException(404, "unknown image or gray ref")

        session_id = uuid.uuid4().hex[:12]
        total = cfg.optimize_steps + cfg.finetune_steps
        job = state.jobs.create("session_build", total=total)
        state.session_status[session_id] = "building"
        state.session_locks[session_id] = threading.Lock()

        def run():
            state.jobs.mark_running(job.job_id)
            try:
                gray_img = load_gray(gray_path)
                primary = load_image(image_path)
                backend = state.base_backend.clone()

                def on_step(rec):
                    step = rec["step"] + (
                        cfg.optimize_steps if rec.get("phase") == "finetune" else 0
                    )
                    if step % EVENT_BUCKET == 0 or step == total - 1:
                        state.jobs.push_event(job.job_id, {**rec, "step": step})

                with state.session_locks[session_id]:
                    session = build_session(
                        gray_img, primary, prompt_set, backend, state.guidance,
                        cfg, session_id=session_id, on_step=on_step,
                    )
                    session.save(state.data_dir / "sessions" / session_id)
                state.sessions[session_id] = session
                state.session_status[session_id] = "ready"
                recon_ref = state.store_image(session.reconstruction)
                state.jobs.finish(
                    job.job_id,
                    result={"session_id": session_id, "reconstruction_ref": recon_ref},
                )
            except Exception as exc:
                state.session_status[session_id] = "failed"
                state.jobs.finish(job.job_id, error=f"{type(exc).__name__}: {exc}")

        state.pool.submit(run)
        return {"job_id": job.job_id, "session_id": session_id}

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, "unknown job")
        return job.snapshot()

    @app.get("/api/jobs/{job_id}/events")
    def job_events(job_id: str):
        if state.jobs.get(job_id) is None:
            raise HTTPException(404, "unknown job")
        return StreamingResponse(
            state.jobs.stream(job_id), media_type="text/event-stream"
        )

    # -- sessions ------------------------------------------------------------------

    def _get_session(session_id: str) -> EditSession:
        status = state.session_status.get(session_id)
        if status is None:
            raise HTTPException(404, "unknown session")
        if status == "building":
            raise HTTPException(409, "session is still building")
        if status == "failed":
            raise HTTPException(409, "session build failed")
        session = state.sessions.get(session_id)
        if session is None:
            try:
                session = EditSession.load(
                    state.data_dir / "sessions" / session_id, guidance=state.guidance
                )
            except (SessionIncomplete, FileNotFoundError):
                raise HTTPException(404, "unknown session")
            state.sessions[session_id] = session
        return session

    @app.get("/api/sessions/{session_id}")
    def session_manifest(session_id: str):
        status = state.session_status.get(session_id)
        if status is None:
            raise HTTPException(404, "unknown session")
        if status != "ready":
            return {"session_id": session_id, "status": status}
        session = _get_session(session_id)
        return {
            "session_id": session_id,
            "status": status,
            "prompt_set": session.prompt_set.to_dict(),
            "recon_seed": session.recon_seed,
            "eta_default_range": list(default_eta_grid(2)),
            "checkpoints": ["checkpoint.ckpt"],
            "sample_steps": session.config.sample_steps,
        }

    @app.post("/api/sessions/{session_id}/render")
    def render(session_id: str, body: dict):
        session = _get_session(session_id)
        eta = body.get("eta", 0.85)
        seed = body.get("seed", session.recon_seed)
        assignments = body.get("color_assignments")
        suffix = body.get("suffix")
        try:
            img = edit(
                session, float(eta), int(seed),
                color_assignments=assignments, suffix=suffix,
            )
        except (EtaOutOfRange, UnknownObject) as exc:
            raise HTTPException(422, str(exc))
        except SessionIncomplete as exc:
            raise HTTPException(409, str(exc))
        return Response(content=_png_bytes(img), media_type="image/png")

    @app.post("/api/sessions/{session_id}/variants")
    def variants(session_id: str, body: dict):
        session = _get_session(session_id)
        count = int(body.get("count", 8))
        if count < 1 or count > 64:
            raise HTTPException(422, "count must be in 1..64")
        eta_range = body.get("eta_range")
        if eta_range:
            lo, hi = float(eta_range[0]), float(eta_range[1])
            if not (0.0 <= lo <= hi <= 1.0):
                raise HTTPException(422, "eta_range must satisfy 0 <= lo <= hi <= 1")
            etas = [lo + (hi - lo) * i / max(count - 1, 1) for i in range(count)]
        else:
            etas = default_eta_grid(count)
        seeds = body.get("seeds") or [session.recon_seed + 1 + i for i in range(count)]
        if len(seeds) != count:
            raise HTTPException(422, f"need exactly {count} seeds")
        assignments = body.get("color_assignments")
        out = []
        try:
            for eta, seed in zip(etas, seeds):
                img = edit(session, float(eta), int(seed), color_assignments=assignments)
                ref = state.store_image(img)
                out.append({"eta": eta, "seed": seed, "url": f"/api/artifacts/{ref}"})
        except (EtaOutOfRange, UnknownObject) as exc:
            raise HTTPException(422, str(exc))
        return {"variants": out}

    return app


def main():  # pragma: no cover
    import uvicorn

    uvicorn.run(create_app(), host="127.0.0.1", port=int(os.environ.get("PORT", 8008)))


if __name__ == "__main__":  # pragma: no cover
    main()
