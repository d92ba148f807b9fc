import numpy as np
import pytest

from dineuro.tensor import Tensor, backward


def numeric_grad(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            fp = fn(*arrays)
            arr[i] = old - h
            fm = fn(*arrays)
            arr[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build, arrays, h=1e-5):
    """Compare analytic and central-difference gradients; returns worst rel. error.

    ``build`` maps leaf Tensors to a scalar Tensor.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*leaves)
    backward(loss)
    work = [a.copy() for a in arrays]

    def f(*arrs):
        return build(*[Tensor(x) for x in arrs]).item()

    numeric = numeric_grad(f, work, h)
    return max(rel_err(leaf.grad, n) for leaf, n in zip(leaves, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def directional_check(build, arrays, rng, directions=3, h=1e-5):
    """Worst rel. error between grad . v and central differences along random v.

    For leaves too large to difference entry by entry.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(build(*leaves))
    worst = 0.0
    for _ in range(directions):
        # unit-norm per leaf so a step stays inside one piece of piecewise-linear ops
        vs = [v / np.linalg.norm(v) for v in (rng.normal(size=a.shape) for a in arrays)]
        analytic = sum(float(np.sum(leaf.grad * v)) for leaf, v in zip(leaves, vs))
        fp = build(*[Tensor(a + h * v) for a, v in zip(arrays, vs)]).item()
        fm = build(*[Tensor(a - h * v) for a, v in zip(arrays, vs)]).item()
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return worst


_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(n, title, passed, detail)`` prints and records one pass/fail line."""
    store = request.config.stash.setdefault(_RESULTS, [])

    def report(n, title, passed, detail=""):
        line = f"criterion {n} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        print(line)
        store.append(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
