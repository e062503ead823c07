import numpy as np
import pytest

from fspnet.autodiff import tensor as T


def numeric_grad(f, x, h=1e-6, order=2):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (in place).

    ``order=4`` uses the five-point stencil, which tolerates a larger step and
    so loses less to round-off when ``f`` is large compared with its gradient.
    """
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]

        def at(step):
            x[i] = old + step
            return f()

        if order == 4:
            g[i] = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
        else:
            g[i] = (at(h) - at(-h)) / (2 * h)
        x[i] = old
    return g


def rel_err(a, b):
    """Largest elementwise relative error; entries far below the array scale use the scale."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3 * scale)
    return float(np.max(np.abs(a - b) / denom))


def check_grads(build, leaves, h=1e-6, order=2):
    """Compare reverse-mode gradients of ``build()`` to central differences for each leaf."""
    for leaf in leaves:
        leaf.zero_grad()
    out = build()
    out.backward()
    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(lambda: build().item(), leaf.values, h, order)
        worst = max(worst, rel_err(leaf.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def leaf(values):
    return T.DiffArray(np.array(values, dtype=float), requires_grad=True)


# -- acceptance reporting ------------------------------------------------------------
ACCEPTANCE_LINES = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the run summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, {})

    def report(number, ok, detail):
        lines[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
