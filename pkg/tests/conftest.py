import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def fd_param_grad(net, objective, step=1e-5):
    """Central differences of ``objective(net)`` over the flat parameter vector."""
    base = net.get_flat()
    out = np.empty_like(base)
    for k in range(len(base)):
        hi = base.copy()
        hi[k] += step
        net.set_flat(hi)
        f_hi = float(objective(net).detach())
        lo = base.copy()
        lo[k] -= step
        net.set_flat(lo)
        f_lo = float(objective(net).detach())
        out[k] = (f_hi - f_lo) / (2 * step)
    net.set_flat(base)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
