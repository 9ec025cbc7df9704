from pathlib import Path

import numpy as np
import pytest

from hybridlab import tensor as T
from hybridlab.model import load_checkpoint

DATA = Path(__file__).parent / "data"
ROOT = Path(__file__).parents[1]
DEFAULT_CONFIG = ROOT / "configs" / "default.ini"


def reference_teacher():
    """A fresh copy of the shipped toy teacher (seed 0 of configs/default.ini)."""
    return load_checkpoint(DATA / "reference_teacher.ckpt")


def central_difference(fn, arrays, index, step=1e-5):
    """Numerical gradient of scalar ``fn(*arrays)`` with respect to ``arrays[index]``."""
    base = arrays[index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = base[idx]
        base[idx] = orig + step
        hi = fn(*arrays)
        base[idx] = orig - step
        lo = fn(*arrays)
        base[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
    return grad


def autodiff_grads(build, arrays):
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    loss.backward()
    return [t.grad for t in tensors]


def check_gradients(build, arrays, rtol=1e-3, step=1e-5):
    """Compare autodiff against central differences; returns the worst relative error."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = autodiff_grads(build, arrays)

    def value(*arrs):
        with T.no_grad():
            return float(build(*[T.Tensor(a) for a in arrs]).data)

    worst = 0.0
    for i in range(len(arrays)):
        num = central_difference(value, arrays, i, step)
        ana = grads[i] if grads[i] is not None else np.zeros_like(num)
        rel = np.abs(ana - num) / (np.abs(num) + 1e-8)
        # entries whose true derivative is ~0 are judged on absolute error
        rel = np.where(np.abs(num) < 1e-6, np.abs(ana - num) / 1e-3, rel)
        worst = max(worst, float(rel.max()))
    assert worst < rtol, f"gradient check failed: worst relative error {worst:.3g}"
    return worst


@pytest.fixture(autouse=True)
def _f64():
    with T.precision("f64"):
        yield


# acceptance criteria append one line each; repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
