import json

import pytest
from click.testing import CliRunner

from diffcolor.cli import main
from diffcolor.core import rgb_to_gray, save_image
from diffcolor.shapes import shapes_dataset
from tests.conftest import CACHE_DIR, CONTEXT_PROMPT


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, toy_backend):
    # toy_backend fixture guarantees the cached pre-trained weights exist
    d = tmp_path_factory.mktemp("cli")
    img = shapes_dataset(seed=77, count=1, size=32)[0]
    save_image(img, d / "color.png")
    save_image(rgb_to_gray(img), d / "gray.png", bit_depth=16)
    cfg = d / "toy.toml"
    cfg.write_text("[stage1]\nsteps = 40\n\n[stage2]\noptimize_steps = 30\nfinetune_steps = 40\n")
    return d


@pytest.fixture(autouse=True)
def _cache_env(monkeypatch):
    monkeypatch.setenv("DIFFCOLOR_CACHE", str(CACHE_DIR))


def test_help_exits_zero(runner):
    assert runner.invoke(main, ["--help"]).exit_code == 0
    assert runner.invoke(main, ["colorize", "--help"]).exit_code == 0


def test_invalid_flag_exits_two(runner):
    assert runner.invoke(main, ["colorize", "--no-such-flag"]).exit_code == 2


def test_colorize_missing_prompt_exits_two(runner, workdir):
    result = runner.invoke(
        main, ["colorize", "--gray", str(workdir / "gray.png"), "--out", str(workdir / "x")]
    )
    assert result.exit_code == 2
    assert "prompt" in result.output.lower()


def test_colorize_smoke_writes_artifacts(runner, workdir):
    out = workdir / "run_smoke"
    result = runner.invoke(
        main,
        [
            "colorize", "--gray", str(workdir / "gray.png"),
            "--prompt", CONTEXT_PROMPT,
            "--config", str(workdir / "toy.toml"),
            "--out", str(out), "--seed", "3",
        ],
    )
    assert result.exit_code == 0, result.output
    for name in ("x_pri.png", "x_pri_aligned.png", "training_log.jsonl", "manifest.json"):
        assert (out / name).exists(), name
    log_lines = (out / "training_log.jsonl").read_text().splitlines()
    assert len(log_lines) == 40
    first = json.loads(log_lines[0])
    assert set(first) == {"step", "ldm", "cst", "combined"}
    effective = json.loads((out / "effective_config.json").read_text())
    assert effective["stage1"]["steps"] == 40
    assert effective["stage1"]["seed"] == 3


def test_colorize_rerun_same_seed_byte_identical(runner, workdir):
    outputs = []
    for name in ("det_a", "det_b"):
        out = workdir / name
        result = runner.invoke(
            main,
            [
                "colorize", "--gray", str(workdir / "gray.png"),
                "--prompt", CONTEXT_PROMPT,
                "--config", str(workdir / "toy.toml"),
                "--out", str(out), "--seed", "11",
            ],
        )
        assert result.exit_code == 0, result.output
        outputs.append((out / "x_pri_aligned.png").read_bytes())
    assert outputs[0] == outputs[1]


@pytest.fixture(scope="module")
def built_session(runner, workdir):
    # stage1 output to reconstruct
    run_dir = workdir / "run_for_session"
    result = runner.invoke(
        main,
        [
            "colorize", "--gray", str(workdir / "gray.png"),
            "--prompt", CONTEXT_PROMPT,
            "--config", str(workdir / "toy.toml"),
            "--out", str(run_dir), "--seed", "3",
        ],
    )
    assert result.exit_code == 0, result.output
    sess_dir = workdir / "session"
    result = runner.invoke(
        main,
        [
            "edit-session", "build",
            "--image", str(run_dir / "x_pri_aligned.png"),
            "--gray", str(workdir / "gray.png"),
            "--prompt", CONTEXT_PROMPT,
            "--objects", "red square,blue circle",
            "--config", str(workdir / "toy.toml"),
            "--out", str(sess_dir), "--seed", "3",
        ],
    )
    assert result.exit_code == 0, result.output
    return sess_dir


def test_render_eta_zero_reproduces_reconstruction(runner, built_session):
    out_png = built_session.parent / "recon_check.png"
    result = runner.invoke(
        main,
        [
            "edit-session", "render", "--session", str(built_session),
            "--eta", "0", "--out", str(out_png),
        ],
    )
    assert result.exit_code == 0, result.output
    assert out_png.read_bytes() == (built_session / "reconstruction.png").read_bytes()


def test_render_variants_eta_grid_in_filenames(runner, built_session):
    result = runner.invoke(
        main,
        ["edit-session", "render", "--session", str(built_session), "--variants", "8"],
    )
    assert result.exit_code == 0, result.output
    files = sorted((built_session / "renders").glob("variant_eta*.png"))
    assert len(files) == 8
    etas = [float(f.name.split("eta")[1].split("_")[0]) for f in files]
    assert etas == sorted(etas)
    assert etas[0] == pytest.approx(0.7) and etas[-1] == pytest.approx(0.975)


def test_render_unknown_object_exits_two(runner, built_session):
    result = runner.invoke(
        main,
        [
            "edit-session", "render", "--session", str(built_session),
            "--colors", "zebra=pink", "--eta", "0.8",
        ],
    )
    assert result.exit_code == 2
    assert "zebra" in result.output


def test_render_incomplete_session_exits_four(runner, tmp_path):
    empty = tmp_path / "empty_session"
    empty.mkdir()
    result = runner.invoke(main, ["edit-session", "render", "--session", str(empty)])
    assert result.exit_code == 4


def test_build_unknown_object_word_exits_two(runner, workdir):
    result = runner.invoke(
        main,
        [
            "edit-session", "build",
            "--image", str(workdir / "color.png"),
            "--gray", str(workdir / "gray.png"),
            "--prompt", CONTEXT_PROMPT,
            "--objects", "purple dragon",
            "--out", str(workdir / "bad_session"),
        ],
    )
    assert result.exit_code == 2
    assert "purple dragon" in result.output


def test_eval_self_comparison(runner, workdir, tmp_path):
    refs = tmp_path / "refs"
    refs.mkdir()
    for i, img in enumerate(shapes_dataset(4, 3)):
        save_image(img, refs / f"{i}.png")
    result = runner.invoke(
        main, ["eval", "--outputs", str(refs), "--refs", str(refs), "--out", str(tmp_path / "rep")]
    )
    assert result.exit_code == 0, result.output
    assert "psnr=100" in result.output
    assert (tmp_path / "rep" / "report.csv").exists()


def test_eval_missing_pair_exits_two(runner, tmp_path):
    refs = tmp_path / "r2"
    outs = tmp_path / "o2"
    refs.mkdir(), outs.mkdir()
    imgs = shapes_dataset(5, 2)
    save_image(imgs[0], refs / "a.png")
    save_image(imgs[1], refs / "b.png")
    save_image(imgs[0], outs / "a.png")
    result = runner.invoke(main, ["eval", "--outputs", str(outs), "--refs", str(refs)])
    assert result.exit_code == 2
    assert "b.png" in result.output


def test_colorize_json_config_and_negatives_file(runner, workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"stage1": {"steps": 25}}')
    negs = tmp_path / "negs.json"
    negs.write_text('["A grayscale photograph.", "A faded slide."]')
    out = tmp_path / "run_json"
    result = runner.invoke(
        main,
        [
            "colorize", "--gray", str(workdir / "gray.png"),
            "--prompt", CONTEXT_PROMPT,
            "--config", str(cfg),
            "--negatives", str(negs),
            "--out", str(out), "--seed", "2",
        ],
    )
    assert result.exit_code == 0, result.output
    effective = json.loads((out / "effective_config.json").read_text())
    assert effective["stage1"]["steps"] == 25
    assert effective["negatives"] == ["A grayscale photograph.", "A faded slide."]
    assert len((out / "training_log.jsonl").read_text().splitlines()) == 25
