import numpy as np
import pytest
import torch

from hiervid.dataset import SynthConfig, synth_clip


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return SynthConfig(n_train=3, n_test=2, clip_length=14, k=4)


@pytest.fixture
def clip():
    return synth_clip(SynthConfig(clip_length=20, k=4), np.random.default_rng(5), "c0")


def make_clips(n, seed=0, length=30, size=64):
    cfg = SynthConfig(clip_length=length, k=4, image_size=size)
    ss = np.random.SeedSequence(seed).spawn(n)
    return [synth_clip(cfg, np.random.default_rng(s), f"c{i}") for i, s in enumerate(ss)]


ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str):
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
