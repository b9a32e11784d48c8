import numpy as np
import pytest

from fastgcl.autodiff import Tape, Tensor


def numeric_vjp(fn, arrays, cotangent, eps=1e-6):
    """Central differences of <cotangent, fn(*arrays)> w.r.t. every input array."""
    grads = []
    arrays = [np.ascontiguousarray(a, dtype=float) for a in arrays]
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = np.sum(cotangent * fn(*arrays))
            flat[i] = orig - eps
            fm = np.sum(cotangent * fn(*arrays))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def tape_vjp(op, arrays, cotangent):
    """Analytic vector-Jacobian product through the tape."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*ts)
    tape.backward(out, seed=cotangent)
    return out.data, [tape.grad(t) for t in ts]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
