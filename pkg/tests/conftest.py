import numpy as np
import pytest

from iada.corpus import GeneratorConfig, generate
from iada.model import Doc2DocTransformer, ModelConfig


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        keep = x[idx]
        x[idx] = keep + h
        up = f()
        x[idx] = keep - h
        down = f()
        x[idx] = keep
        out[idx] = (up - down) / (2 * h)
    return out


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def tiny_model():
    return Doc2DocTransformer(ModelConfig(vocab_size=30, d_model=16, n_heads=2, n_layers=1, d_ffn=32, max_len=64))


@pytest.fixture(scope="session")
def small_corpus():
    return generate(GeneratorConfig(n_docs=6, sents_per_doc=3, n_valid_docs=2, n_test_docs=2, seed=3))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
