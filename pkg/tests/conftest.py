import time
from types import SimpleNamespace

import numpy as np
import pytest

from medivlad import numerics as nx
from medivlad.encoder import EncoderConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return EncoderConfig.from_profile("tiny")


@pytest.fixture
def f64():
    with nx.precision(np.float64):
        yield


# --- shared synthetic pipeline (session scoped, built on first use) ------------

@pytest.fixture(scope="session")
def frame_split():
    """300 labeled train frames and 150 test frames with pattern masks."""
    from medivlad.data import synth_frames

    tr, trl, _ = synth_frames(100, 64, 0.1, seed=1)
    te, tel, tem = synth_frames(50, 64, 0.1, seed=2)
    return tr, trl, te, tel, tem


@pytest.fixture(scope="session")
def pretrained(tmp_path_factory):
    """Tiny-profile pretraining on 600 unlabeled synthetic frames."""
    from medivlad.cli import stage_defaults
    from medivlad.data import synth_frames
    from medivlad.distill import pretrain

    frames, labels, _ = synth_frames(200, 64, 0.1, seed=0)
    log = tmp_path_factory.mktemp("pretrain") / "loss.csv"
    start = time.perf_counter()
    ckpt = pretrain(frames, stage_defaults("tiny", "pretrain"), "tiny", seed=0, log_path=log)
    return SimpleNamespace(ckpt=ckpt, log=log, frames=frames, labels=labels,
                           seconds=time.perf_counter() - start)


@pytest.fixture(scope="session")
def finetuned(pretrained, frame_split):
    """Finetuned checkpoint plus the per-epoch test accuracy trajectory."""
    from medivlad.cli import stage_defaults
    from medivlad.finetune import finetune, predict_frame

    tr, trl, te, tel, _ = frame_split
    accs = []

    def track(model, epoch):
        accs.append(float((predict_frame(model, te).argmax(1) == tel).mean()))

    start = time.perf_counter()
    ckpt = finetune(pretrained.ckpt, tr, trl, stage_defaults("tiny", "finetune"), seed=0, eval_fn=track)
    return SimpleNamespace(ckpt=ckpt, accs=accs, seconds=time.perf_counter() - start)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, when that module ran."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        ok, detail = results[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
