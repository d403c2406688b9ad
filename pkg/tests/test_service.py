import json
import threading
import time

import pytest
from fastapi.testclient import TestClient

from diffcolor.core import rgb_to_gray, save_image
from diffcolor.instrumentation import gradient_steps
from diffcolor.service import create_app
from diffcolor.shapes import shapes_dataset
from diffcolor.stage1 import Stage1Config
from diffcolor.stage2 import Stage2Config
from tests.conftest import CONTEXT_PROMPT, OBJECT_SPANS


def wait_for_job(client, job_id, timeout=120.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        job = client.get(f"/api/jobs/{job_id}").json()
        if job["status"] in ("done", "failed"):
            return job
        time.sleep(0.1)
    raise TimeoutError(f"job {job_id} did not finish")


@pytest.fixture(scope="module")
def client(tmp_path_factory, toy_backend):
    # toy_backend fixture ensures the cached weights exist before app startup
    data_dir = tmp_path_factory.mktemp("service-data")
    app = create_app(
        data_dir=data_dir,
        stage1_defaults=Stage1Config.toy(steps=40),
        stage2_defaults=Stage2Config.toy(optimize_steps=30, finetune_steps=40),
    )
    with TestClient(app) as c:
        yield c


@pytest.fixture(scope="module")
def gray_png_bytes(tmp_path_factory):
    d = tmp_path_factory.mktemp("img")
    img = shapes_dataset(seed=77, count=1, size=32)[0]
    save_image(rgb_to_gray(img), d / "gray.png", bit_depth=16)
    return (d / "gray.png").read_bytes()


@pytest.fixture(scope="module")
def stage1_job(client, gray_png_bytes):
    r = client.post(
        "/api/jobs/stage1",
        files={"gray": ("gray.png", gray_png_bytes, "image/png")},
        data={"prompt": CONTEXT_PROMPT},
    )
    assert r.status_code == 200
    job = wait_for_job(client, r.json()["job_id"])
    assert job["status"] == "done", job["error"]
    job["job_id"] = r.json()["job_id"]
    return job


@pytest.fixture(scope="module")
def ready_session(client, stage1_job):
    res = stage1_job["result"]
    r = client.post(
        "/api/jobs/session",
        json={
            "image_ref": res["aligned_ref"],
            "gray_ref": res["gray_ref"],
            "prompt": CONTEXT_PROMPT,
            "object_spans": [list(s) for s in OBJECT_SPANS],
        },
    )
    assert r.status_code == 200
    body = r.json()
    job = wait_for_job(client, body["job_id"])
    assert job["status"] == "done", job["error"]
    return {"session_id": body["session_id"], "job": job}


def test_stage1_job_completes_with_artifacts(client, stage1_job):
    res = stage1_job["result"]
    for key in ("gray_ref", "primary_ref", "aligned_ref"):
        art = client.get(f"/api/artifacts/{res[key]}")
        assert art.status_code == 200
        assert art.content[:4] == b"\x89PNG"


def test_job_events_strictly_ordered(client, stage1_job):
    r = client.get(f"/api/jobs/{stage1_job['job_id']}/events")
    assert r.status_code == 200
    events = [json.loads(l[6:]) for l in r.text.splitlines() if l.startswith("data: ")]
    steps = [e["step"] for e in events if "step" in e]
    assert steps == sorted(steps) and len(steps) >= 2
    assert events[-1].get("event") == "end"


def test_job_progress_monotone(client, gray_png_bytes):
    r = client.post(
        "/api/jobs/stage1",
        files={"gray": ("gray.png", gray_png_bytes, "image/png")},
        data={"prompt": CONTEXT_PROMPT, "config": json.dumps({"steps": 30})},
    )
    job_id = r.json()["job_id"]
    seen = []
    while True:
        job = client.get(f"/api/jobs/{job_id}").json()
        seen.append(job["progress"])
        if job["status"] in ("done", "failed"):
            break
        time.sleep(0.05)
    assert all(b >= a for a, b in zip(seen, seen[1:]))
    assert seen[-1] == 1.0


def test_unknown_job_404(client):
    assert client.get("/api/jobs/doesnotexist").status_code == 404


def test_stage1_rejects_empty_prompt(client, gray_png_bytes):
    r = client.post(
        "/api/jobs/stage1",
        files={"gray": ("gray.png", gray_png_bytes, "image/png")},
        data={"prompt": "   "},
    )
    assert r.status_code == 422


def test_render_eta_zero_byte_identical_to_reconstruction(client, ready_session):
    sid = ready_session["session_id"]
    manifest = client.get(f"/api/sessions/{sid}").json()
    recon_ref = ready_session["job"]["result"]["reconstruction_ref"]
    recon_bytes = client.get(f"/api/artifacts/{recon_ref}").content
    counter_before = gradient_steps.read()
    r = client.post(
        f"/api/sessions/{sid}/render",
        json={"eta": 0.0, "seed": manifest["recon_seed"]},
    )
    assert r.status_code == 200
    assert gradient_steps.read() == counter_before  # zero optimization steps
    assert r.content == recon_bytes


def test_render_validation_errors(client, ready_session):
    sid = ready_session["session_id"]
    assert client.post(f"/api/sessions/{sid}/render", json={"eta": 1.5}).status_code == 422
    r = client.post(
        f"/api/sessions/{sid}/render",
        json={"eta": 0.8, "color_assignments": {"zebra": "pink"}},
    )
    assert r.status_code == 422
    assert client.get("/api/sessions/unknown").status_code == 404
    assert client.post("/api/sessions/unknown/render", json={"eta": 0.5}).status_code == 404


def test_render_on_building_session_409(client, stage1_job):
    res = stage1_job["result"]
    r = client.post(
        "/api/jobs/session",
        json={
            "image_ref": res["aligned_ref"],
            "gray_ref": res["gray_ref"],
            "prompt": CONTEXT_PROMPT,
            "object_spans": [list(s) for s in OBJECT_SPANS],
            "config": {"optimize_steps": 60, "finetune_steps": 60},
        },
    )
    sid = r.json()["session_id"]
    r409 = client.post(f"/api/sessions/{sid}/render", json={"eta": 0.0})
    assert r409.status_code in (409, 200)  # 200 only if the build already won the race
    if r409.status_code == 200:
        pytest.skip("build finished before the render raced it")
    wait_for_job(client, r.json()["job_id"])


def test_concurrent_renders_succeed(client, ready_session):
    sid = ready_session["session_id"]
    results = []

    def hit(seed):
        r = client.post(
            f"/api/sessions/{sid}/render",
            json={"eta": 0.8, "seed": seed, "color_assignments": {"red square": "green"}},
        )
        results.append((r.status_code, r.content))

    threads = [threading.Thread(target=hit, args=(s,)) for s in (5, 6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert [code for code, _ in results] == [200, 200]
    assert results[0][1] != results[1][1]  # different seeds, independent outputs


def test_variants_endpoint(client, ready_session):
    sid = ready_session["session_id"]
    r = client.post(f"/api/sessions/{sid}/variants", json={"count": 8})
    assert r.status_code == 200
    variants = r.json()["variants"]
    assert len(variants) == 8
    etas = [v["eta"] for v in variants]
    assert etas == sorted(etas)
    assert all(0.7 <= e < 1.0 for e in etas)
    first = client.get(variants[0]["url"])
    assert first.status_code == 200 and first.content[:4] == b"\x89PNG"


def test_session_manifest_contents(client, ready_session):
    sid = ready_session["session_id"]
    man = client.get(f"/api/sessions/{sid}").json()
    assert man["status"] == "ready"
    assert man["prompt_set"]["context"] == CONTEXT_PROMPT
    assert "rewritten" in man["prompt_set"]
    assert isinstance(man["recon_seed"], int)
    assert man["checkpoints"] == ["checkpoint.ckpt"]


def test_prompt_echo_endpoint(client):
    r = client.post(
        "/api/prompts/rewrite",
        json={"context": CONTEXT_PROMPT, "object_spans": [list(s) for s in OBJECT_SPANS]},
    )
    assert r.status_code == 200
    body = r.json()
    assert body["rewritten"] == "a [*] red square and a [*] blue circle on a light background"
    r = client.post(
        "/api/prompts/rewrite",
        json={"context": "red car", "object_spans": [[0, 5], [4, 7]]},
    )
    assert r.status_code == 422


def test_upload_roundtrip(client, gray_png_bytes):
    r = client.post("/api/uploads", files={"file": ("g.png", gray_png_bytes, "image/png")})
    assert r.status_code == 200
    ref = r.json()["ref"]
    assert client.get(f"/api/artifacts/{ref}").content == gray_png_bytes
    bad = client.post("/api/uploads", files={"file": ("x.png", b"not an image", "image/png")})
    assert bad.status_code == 422
