import numpy as np
import pytest

from hetscale.model import ModelConfig


def fd_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at float64 ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f(x)
        x[i] = old - eps
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(embed_dim=8, depth=2, num_heads=2, mlp_ratio=4.0, fc_reduce=2,
                       attn_reduce=2, patch_size=2, image_size=4, num_classes=3, in_chans=1)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(name: str, passed: bool, detail: str, status: str | None = None) -> bool:
    """Remember one acceptance verdict; all verdicts are listed at session end.

    ``status`` overrides the PASS/FAIL word, e.g. WARN for soft criteria.
    """
    line = f"{status or ('PASS' if passed else 'FAIL')}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
