from __future__ import annotations

import numpy as np
import pytest

from hdcam import tensor as T
from hdcam.tensor import backend

# (criterion number, label, passed) collected by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, bool]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, label, ok in sorted(ACCEPTANCE):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {label}")


@pytest.fixture(params=backend.available())
def kernel_backend(request):
    """Run a test once per available kernel set, restoring the default after."""
    before = backend.name()
    backend.use(request.param)
    yield request.param
    backend.use(before)


def numeric_grad(f, arrays, i, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(*arrays)
        x[idx] = old - h
        fm = f(*arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    # the floor keeps gradients that are zero in exact arithmetic (attention
    # key bias, for one) from dividing rounding noise by rounding noise: below
    # norm 1e-4 the check is effectively absolute at 1e-8
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-4)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, arrays, seed=0, h=1e-5):
    """Compare tape gradients with central differences for ``fn(*tensors) -> Tensor``.

    The output is contracted with a fixed random tensor so every output
    element contributes. Returns the worst relative error over inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with T.no_grad():
        out_shape = fn(*[T.Tensor(a) for a in arrays]).shape
    R = np.random.default_rng(seed + 12345).standard_normal(out_shape)

    def scalar(*arrs):
        with T.no_grad():
            return float(np.sum(fn(*[T.Tensor(a) for a in arrs]).data * R))

    ts = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = T.sum(T.mul(fn(*ts), T.Tensor(R)))
    T.backward(loss)
    worst = 0.0
    for i, t in enumerate(ts):
        num = numeric_grad(scalar, arrays, i, h)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        worst = max(worst, rel_err(ana, num))
    return worst


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.get_tape().clear()
    yield
    T.get_tape().clear()
