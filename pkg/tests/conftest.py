import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from prunebench.models import build  # noqa: E402
from prunebench.training import init_weights  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(arch="mlp_300_100", precision="bits64", seed=0, **kw):
    model = build(arch, 10, precision, **kw)
    init_weights(model, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for p in model.param_tensors():
        if not p.prunable:
            p.weights.data = rng.normal(0, 0.1, p.shape).astype(model.dtype)
    return model


# acceptance verdicts, filled in by test_acceptance.py and echoed after the run
VERDICTS: dict[int, tuple[bool, str]] = {}
CRITERIA = range(1, 11)


def pytest_terminal_summary(terminalreporter):
    reports = [r for key in ("passed", "failed", "error") for r in terminalreporter.stats.get(key, [])]
    if not VERDICTS and not any("test_acceptance" in getattr(r, "nodeid", "") for r in reports):
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        if n in VERDICTS:
            ok, detail = VERDICTS[n]
            terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:>2}: NOT RUN")
