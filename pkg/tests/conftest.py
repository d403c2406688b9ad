import os
import time
from pathlib import Path

import pytest

from diffcolor.align import align_chroma
from diffcolor.core import rgb_to_gray
from diffcolor.diffusion import build_toy_backend
from diffcolor.guidance import NegativePromptSet, ToyGuidanceBackend
from diffcolor.shapes import shapes_dataset
from diffcolor.stage1 import Stage1Config, colorize_stage1
from diffcolor.stage2 import PromptSet, Stage2Config, build_session, quantize_gray

# toy-backend pre-training is a one-time deterministic build; cache it next
# to the repo so repeated test runs skip the ~4 minute warm-up
CACHE_DIR = Path(os.environ.get("DIFFCOLOR_CACHE", Path(__file__).parent.parent / ".toycache"))

CONTEXT_PROMPT = "a red square and a blue circle on a light background"
OBJECT_SPANS = [(2, 12), (19, 30)]  # "red square", "blue circle"


@pytest.fixture(scope="session")
def toy_backend():
    return build_toy_backend(seed=0, cache_dir=CACHE_DIR)


@pytest.fixture(scope="session")
def guidance():
    return ToyGuidanceBackend()


@pytest.fixture(scope="session")
def negatives():
    return NegativePromptSet.default()


@pytest.fixture(scope="session")
def sample_image():
    return shapes_dataset(seed=77, count=1, size=32)[0]


@pytest.fixture(scope="session")
def sample_gray(sample_image):
    return quantize_gray(rgb_to_gray(sample_image))


@pytest.fixture(scope="session")
def stage1_run(toy_backend, guidance, negatives, sample_gray):
    """The 300-step guided Stage-1 run shared by stage1 and acceptance tests."""
    backend = toy_backend.clone()
    frozen_before = [p.detach().clone() for p in backend.frozen_parameters()]
    cfg = Stage1Config.toy(steps=300, seed=0)
    t0 = time.perf_counter()
    x_pri, ref, log = colorize_stage1(
        sample_gray, CONTEXT_PROMPT, negatives, cfg, backend, guidance
    )
    return {
        "backend": ref,
        "x_pri": x_pri,
        "log": log,
        "cfg": cfg,
        "frozen_before": frozen_before,
        "elapsed": time.perf_counter() - t0,
    }


@pytest.fixture(scope="session")
def stage1_control_run(toy_backend, guidance, negatives, sample_gray):
    """Identical run with the contrastive term disabled (lambda = 0)."""
    backend = toy_backend.clone()
    cfg = Stage1Config.toy(steps=300, lam=0.0, seed=0)
    x_pri, ref, log = colorize_stage1(
        sample_gray, CONTEXT_PROMPT, negatives, cfg, backend, guidance
    )
    return {"backend": ref, "x_pri": x_pri, "log": log, "cfg": cfg}


@pytest.fixture(scope="session")
def primary_aligned(sample_gray, stage1_run):
    return align_chroma(sample_gray, stage1_run["x_pri"])


@pytest.fixture(scope="session")
def prompt_set():
    return PromptSet(context=CONTEXT_PROMPT, object_spans=OBJECT_SPANS)


@pytest.fixture(scope="session")
def stage2_session(toy_backend, guidance, sample_gray, primary_aligned, prompt_set):
    """200-step embedding optimization + 300-step fine-tune session."""
    backend = toy_backend.clone()
    cfg = Stage2Config.toy(optimize_steps=200, finetune_steps=300, seed=0)
    return build_session(
        sample_gray, primary_aligned, prompt_set, backend, guidance, cfg
    )


def acceptance_line(name: str):
    """Print one pass/fail line per acceptance criterion."""

    class _Reporter:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            print(f"[{status}] {name}")
            return False

    return _Reporter()
