import numpy as np
import pytest
import torch

from deem.model import DEEMModel, ModelConfig
from deem.sequence import Tokenizer

TINY = dict(dim=32, resolution=16, enc_stride=4, enc_width=8, lm_layers=1, heads=2, m_llm=4, m_enc=4,
            resampler_depth=1, dm_width=8, T=10, max_len=96)


def tiny_model(seed=0, dtype=torch.float32, **overrides):
    torch.manual_seed(seed)
    tok = Tokenizer.from_corpus(["a red circle on a blue square", "is it yes or no"])
    model = DEEMModel(ModelConfig(**{**TINY, **overrides}), tok)
    return model.to(dtype)


@pytest.fixture
def tiny():
    return tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def rand_pixels(rng, size=16, n=None):
    shape = (size, size, 3) if n is None else (n, size, size, 3)
    return rng.random(shape).astype(np.float32)


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, title = mark.args
    prev = _CRITERIA.get(n, (title, True, 0.0))
    _CRITERIA[n] = (title, prev[1] and rep.passed, prev[2] + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, secs = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title} ({secs:.1f}s)")
