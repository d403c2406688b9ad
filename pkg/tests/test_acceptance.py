"""Acceptance suite: one test per release criterion, each printing a
pass/fail line. Tolerances are pinned here and nowhere else."""

import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from diffcolor.align import align_chroma, correspondence_field, mean_displacement
from diffcolor.core import (
    ColorImage,
    GrayImage,
    Rng,
    replicate_gray,
    rgb_to_gray,
    save_image,
)
from diffcolor.diffusion import (
    Latent,
    add_noise,
    ddim_invert,
    ddim_sample,
    ldm_loss,
    make_schedule,
    noise_mse_t,
)
from diffcolor.embedding import TextEmbedding
from diffcolor.guidance import (
    contrastive_loss,
    contrastive_loss_grad,
    image_text_alignment,
)
from diffcolor.instrumentation import gradient_steps
from diffcolor.metrics import (
    GuidanceFeatureExtractor,
    fid,
    lpips_like,
    psnr,
    run_report,
    ssim,
)
from diffcolor.shapes import colored_shapes, shapes_dataset, smooth_field
from diffcolor.stage1 import evaluate_contrastive_term, sample_primary
from diffcolor.stage2 import (
    Stage2Config,
    edit,
    finetune_for_reconstruction,
    interpolate,
    optimize_embedding,
)
from tests.conftest import CACHE_DIR, CONTEXT_PROMPT, acceptance_line
from tests.test_diffusion import FakeBackend, unit_emb
from tests.test_guidance import loss_oracle


def test_loss_oracles():
    with acceptance_line("loss oracles (log-sum-exp, ln4, constant-offset MSE)"):
        t0 = time.perf_counter()
        rng = Rng(101)
        for _ in range(100):
            dim = int(rng.integers(2, 16))
            e = rng.normal(dim)
            e_plus = rng.normal(dim)
            negatives = [rng.normal(dim) for _ in range(int(rng.integers(1, 6)))]
            assert contrastive_loss(e, e_plus, negatives) == pytest.approx(
                loss_oracle(e, e_plus, negatives), abs=1e-9
            )

        e = np.zeros(4)
        negs = [np.eye(4)[i] for i in (1, 2, 3)]
        assert contrastive_loss(e, np.eye(4)[0], negs) == pytest.approx(
            math.log(4.0), abs=1e-12
        )

        c = 0.41
        stored = {}
        backend = FakeBackend(lambda z, t, emb: stored["eps"] + c)
        z0 = Latent(rng.normal((4, 8, 8)))
        eps = Latent(rng.normal((4, 8, 8)))
        stored["eps"] = torch.from_numpy(np.array(eps.data)).unsqueeze(0)
        assert ldm_loss(backend, z0, 7, eps, unit_emb()) == pytest.approx(c * c, rel=1e-12)
        assert time.perf_counter() - t0 < 1.0


def test_gradient_checks():
    with acceptance_line("gradient checks vs central finite differences (rel < 1e-4)"):
        t0 = time.perf_counter()
        rng = Rng(102)
        # contrastive loss gradient w.r.t. the image embedding
        for _ in range(20):
            dim = int(rng.integers(2, 10))
            e = rng.normal(dim)
            e_plus = rng.normal(dim)
            negatives = [rng.normal(dim) for _ in range(int(rng.integers(1, 4)))]
            grad = contrastive_loss_grad(e, e_plus, negatives)
            h = 1e-6
            for k in range(dim):
                ep, em = e.copy(), e.copy()
                ep[k] += h
                em[k] -= h
                fd = (
                    contrastive_loss(ep, e_plus, negatives)
                    - contrastive_loss(em, e_plus, negatives)
                ) / (2 * h)
                assert abs(fd - grad[k]) / max(abs(grad[k]), 1e-8) < 1e-4
        # denoising loss gradient w.r.t. the denoiser output
        eps = torch.from_numpy(rng.normal((4, 8, 8)))
        pred = torch.from_numpy(rng.normal((4, 8, 8))).requires_grad_(True)
        noise_mse_t(eps, pred).backward()
        analytic = pred.grad.numpy().ravel()
        flat = pred.detach().reshape(-1)
        h = 1e-6
        for idx in Rng(103).integers(0, flat.numel(), 20):
            plus, minus = flat.clone(), flat.clone()
            plus[idx] += h
            minus[idx] -= h
            fd = (
                float(noise_mse_t(eps, plus.reshape(eps.shape)))
                - float(noise_mse_t(eps, minus.reshape(eps.shape)))
            ) / (2 * h)
            assert abs(fd - analytic[idx]) / max(abs(analytic[idx]), 1e-8) < 1e-4
        assert time.perf_counter() - t0 < 10.0


def test_schedule_and_diffusion_invariants(toy_backend):
    with acceptance_line("schedule monotonicity, unit-variance noising, DDIM roundtrips"):
        for kind in ("linear", "cosine"):
            s = make_schedule(500, 1e-4, 0.02, kind)
            assert np.all(np.diff(s.alpha_bars) < 0.0)

        s = make_schedule(100, 5e-4, 0.07, "linear")
        rng = Rng(104)
        shape = (4, 125, 200)  # 100,000 iid elements
        for t in (1, 50, 100):
            z_t = add_noise(Latent(rng.normal(shape)), Latent(rng.normal(shape)), t, s)
            assert np.var(z_t.data) == pytest.approx(1.0, abs=0.02)

        # toy backend roundtrip within the frozen regression bound
        emb = TextEmbedding(Rng(105).normal(toy_backend.embedding_dim) / 5)
        for img in shapes_dataset(seed=999, count=4, size=32):
            z0 = toy_backend.encode(img)
            z_T = ddim_invert(toy_backend, z0, emb, steps=20)
            back = ddim_sample(toy_backend, z_T, emb, steps=20)
            assert np.abs(back.data - z0.data).max() < toy_backend.inversion_tolerance

        # zero-noise denoiser: exact roundtrip to 1e-6
        backend = FakeBackend(lambda z, t, e: torch.zeros_like(z))
        z0 = Latent(Rng(106).normal((4, 8, 8)))
        z_T = ddim_invert(backend, z0, unit_emb(), steps=20)
        back = ddim_sample(backend, z_T, unit_emb(), steps=20)
        assert np.abs(back.data - z0.data).max() < 1e-6


def test_interpolation_algebra():
    with acceptance_line("embedding interpolation algebra"):
        rng = Rng(107)
        e_opt = TextEmbedding(rng.normal(16))
        e_tgt = TextEmbedding(rng.normal(16))
        assert interpolate(e_opt, e_tgt, 0.0) is e_opt
        assert interpolate(e_opt, e_tgt, 1.0) is e_tgt
        base = np.linalg.norm(e_opt.vector - e_tgt.vector)
        for eta in (0.0, 0.25, 0.7, 0.9, 1.0):
            blended = interpolate(e_opt, e_tgt, eta)
            assert np.linalg.norm(blended.vector - e_tgt.vector) == pytest.approx(
                (1 - eta) * base, abs=1e-12
            )
        out = interpolate(
            TextEmbedding(np.array([0.0, 2.0])), TextEmbedding(np.array([4.0, 0.0])), 0.75
        )
        assert np.array_equal(out.vector, np.array([3.0, 0.5]))


def test_stage1_end_to_end(
    toy_backend, guidance, negatives, sample_gray, stage1_run, stage1_control_run
):
    with acceptance_line(
        "stage-1 end-to-end: loss decreases, alignment improves, guidance bites"
    ):
        assert stage1_run["cfg"].steps == 300 and stage1_run["cfg"].lam == 0.5
        comb = [r["combined"] for r in stage1_run["log"]]
        ma = [float(np.mean(comb[max(0, i - 99) : i + 1])) for i in range(len(comb))]
        assert ma[-1] < ma[99]

        baseline = toy_backend.decode(toy_backend.encode(replicate_gray(sample_gray)))
        before = image_text_alignment(baseline, CONTEXT_PROMPT, guidance)
        after = image_text_alignment(stage1_run["x_pri"], CONTEXT_PROMPT, guidance)
        assert after > before

        guided = evaluate_contrastive_term(
            stage1_run["backend"], guidance, sample_gray, CONTEXT_PROMPT, negatives
        )
        control = evaluate_contrastive_term(
            stage1_control_run["backend"], guidance, sample_gray, CONTEXT_PROMPT, negatives
        )
        assert guided < control
        assert stage1_run["elapsed"] < 300.0


def test_frozen_component_assertions(
    toy_backend, guidance, stage1_run, primary_aligned, prompt_set
):
    with acceptance_line("frozen components stay bit-identical"):
        # stage 1 leaves encoder/decoder untouched
        for before, after in zip(
            stage1_run["frozen_before"], stage1_run["backend"].frozen_parameters()
        ):
            assert torch.equal(before, after.detach())
        # embedding optimization leaves all weights untouched
        backend = toy_backend.clone()
        before = {k: v.clone() for k, v in backend.named_tensors().items()}
        e_opt = optimize_embedding(
            primary_aligned, prompt_set.rewritten, backend, guidance, steps=50, lr=1e-2
        )
        for k, v in backend.named_tensors().items():
            assert torch.equal(before[k], v.detach())
        # reconstruction fine-tune leaves the embedding untouched
        bits = e_opt.vector.copy()
        finetune_for_reconstruction(primary_aligned, e_opt, backend, steps=50, lr=3e-4)
        assert np.array_equal(e_opt.vector, bits)


def test_stage2_reconstruction(
    toy_backend, guidance, sample_gray, primary_aligned, prompt_set, stage2_session, tmp_path
):
    with acceptance_line(
        "stage-2 reconstruction: byte-exact eta=0 render, LPIPS improves"
    ):
        assert stage2_session.config.optimize_steps == 200
        assert stage2_session.config.finetune_steps == 300
        out = edit(stage2_session, 0.0, stage2_session.recon_seed)
        save_image(out, tmp_path / "render.png")
        save_image(stage2_session.reconstruction, tmp_path / "stored.png")
        assert (tmp_path / "render.png").read_bytes() == (tmp_path / "stored.png").read_bytes()

        # before/after fine-tune comparison on a fresh clone
        backend = toy_backend.clone()
        cfg = Stage2Config.toy(optimize_steps=200, finetune_steps=300, seed=0)
        e_opt = optimize_embedding(
            primary_aligned, prompt_set.rewritten, backend, guidance,
            steps=cfg.optimize_steps, lr=cfg.optimize_lr, seed=cfg.seed,
        )
        extractor = GuidanceFeatureExtractor(guidance)

        def recon(b):
            emb_t = b.to_tensor(e_opt.vector).unsqueeze(0)
            gen = torch.Generator().manual_seed(cfg.seed)
            noise = torch.randn((1, *b.latent_shape), generator=gen, dtype=b.dtype)
            return sample_primary(
                b, sample_gray, emb_t, cfg.sample_steps,
                start_noise=noise, start_noise_scale=cfg.seed_noise,
            )

        pre = recon(backend)
        finetune_for_reconstruction(
            primary_aligned, e_opt, backend,
            steps=cfg.finetune_steps, lr=cfg.finetune_lr, seed=cfg.seed,
        )
        post = recon(backend)
        assert lpips_like(post, primary_aligned, extractor) < lpips_like(
            pre, primary_aligned, extractor
        )


def test_alignment_criteria():
    with acceptance_line("alignment: 40 dB luminance floor, 3 px shift recovery"):
        for seed in range(50):
            rng = Rng(1000 + seed)
            gray = GrayImage(smooth_field(rng, 32)[0])
            colorized = ColorImage(rng.uniform(0, 1, (3, 32, 32)))
            out = align_chroma(gray, colorized)
            value = psnr(replicate_gray(rgb_to_gray(out)), replicate_gray(gray))
            assert value >= 40.0, f"pair {seed}: {value:.2f} dB"

        base = colored_shapes(Rng(5), size=64, n_shapes=4)
        tex = smooth_field(Rng(6), 64, channels=3) * 0.3
        img = ColorImage(np.clip(base.data * 0.7 + tex, 0, 1))
        gray = rgb_to_gray(img)
        shifted = ColorImage(np.roll(img.data, 3, axis=2))
        fy, fx = correspondence_field(gray, shifted)
        dy, dx = mean_displacement(fy, fx)
        assert abs(dy - 0.0) < 1.0 and abs(dx - 3.0) < 1.0


def test_metric_reference_values(tmp_path, guidance):
    with acceptance_line("metric reference values"):
        a = ColorImage(np.zeros((3, 16, 16)))
        b = ColorImage(np.full((3, 16, 16), 0.5))
        assert psnr(a, b) == pytest.approx(6.0206, abs=0.001)

        img = ColorImage(Rng(108).uniform(0, 1, (3, 16, 16)))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

        rng = np.random.default_rng(0)
        sampled = fid(
            rng.standard_normal((100_000, 1)), rng.standard_normal((100_000, 1)) + 1.0
        )
        assert sampled == pytest.approx(1.0, abs=0.02)
        exact = fid(
            np.array([[-math.sqrt(0.5)], [math.sqrt(0.5)]]),
            np.array([[-math.sqrt(2.0)], [math.sqrt(2.0)]]),
        )
        assert exact == pytest.approx(1.0, abs=1e-12)

        refs = tmp_path / "refs"
        refs.mkdir()
        for i, im in enumerate(shapes_dataset(9, 5)):
            save_image(im, refs / f"{i}.png")
        report = run_report(refs, refs, guidance=guidance, out_dir=tmp_path / "rep")
        assert report["psnr"] == 100.0
        assert report["ssim"] == pytest.approx(1.0, abs=1e-9)
        assert report["lpips"] == 0.0
        assert report["fid"] < 1e-6


def test_cli_determinism(tmp_path, toy_backend):
    with acceptance_line("CLI determinism: byte-identical reruns"):
        img = shapes_dataset(seed=77, count=1, size=32)[0]
        save_image(rgb_to_gray(img), tmp_path / "gray.png", bit_depth=16)
        cfg = tmp_path / "toy.toml"
        cfg.write_text("[stage1]\nsteps = 40\n")
        env = dict(os.environ, DIFFCOLOR_CACHE=str(CACHE_DIR))
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            proc = subprocess.run(
                [
                    sys.executable, "-m", "diffcolor.cli", "colorize",
                    "--gray", str(tmp_path / "gray.png"),
                    "--prompt", CONTEXT_PROMPT,
                    "--config", str(cfg),
                    "--out", str(out), "--seed", "11",
                ],
                capture_output=True, text=True, env=env,
            )
            assert proc.returncode == 0, proc.stderr
            outputs.append((out / "x_pri_aligned.png").read_bytes())
        assert outputs[0] == outputs[1]


def test_service_criteria(tmp_path, toy_backend):
    with acceptance_line("service: zero-step renders, byte-exact eta=0, concurrency"):
        import threading

        from fastapi.testclient import TestClient

        from diffcolor.service import create_app
        from diffcolor.stage1 import Stage1Config
        from tests.conftest import OBJECT_SPANS
        from tests.test_service import wait_for_job

        app = create_app(
            data_dir=tmp_path / "data",
            stage1_defaults=Stage1Config.toy(steps=30),
            stage2_defaults=Stage2Config.toy(optimize_steps=30, finetune_steps=40),
        )
        img = shapes_dataset(seed=77, count=1, size=32)[0]
        save_image(rgb_to_gray(img), tmp_path / "gray.png", bit_depth=16)
        with TestClient(app) as client:
            r = client.post(
                "/api/jobs/stage1",
                files={"gray": ("gray.png", (tmp_path / "gray.png").read_bytes(), "image/png")},
                data={"prompt": CONTEXT_PROMPT},
            )
            job = wait_for_job(client, r.json()["job_id"])
            assert job["status"] == "done", job["error"]
            res = job["result"]
            r = client.post(
                "/api/jobs/session",
                json={
                    "image_ref": res["aligned_ref"],
                    "gray_ref": res["gray_ref"],
                    "prompt": CONTEXT_PROMPT,
                    "object_spans": [list(s) for s in OBJECT_SPANS],
                },
            )
            sid = r.json()["session_id"]
            job = wait_for_job(client, r.json()["job_id"])
            assert job["status"] == "done", job["error"]
            recon_bytes = client.get(
                f"/api/artifacts/{job['result']['reconstruction_ref']}"
            ).content
            manifest = client.get(f"/api/sessions/{sid}").json()

            counter = gradient_steps.read()
            render = client.post(
                f"/api/sessions/{sid}/render",
                json={"eta": 0.0, "seed": manifest["recon_seed"]},
            )
            assert render.status_code == 200
            assert gradient_steps.read() == counter
            assert render.content == recon_bytes

            results = []

            def hit(seed):
                rr = client.post(
                    f"/api/sessions/{sid}/render", json={"eta": 0.8, "seed": seed}
                )
                results.append(rr.status_code)

            threads = [threading.Thread(target=hit, args=(s,)) for s in (3, 4)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert results == [200, 200]
