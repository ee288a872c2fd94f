import numpy as np
import pytest

from koopid import autodiff as ad


def central_difference(loss_fn, params, step=1e-6):
    """Central finite-difference gradient of ``loss_fn()`` w.r.t. each parameter array."""
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            g.reshape(-1)[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def max_relative_error(a, b, floor):
    """Largest componentwise ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def gradient_error(loss_fn, params, step=1e-6):
    """Max componentwise relative error of reverse-mode vs central-difference gradients.

    Components are compared relative to their own size, but never relative to
    less than ``1e-4 * max(1, |loss|)``: central differences carry roughly
    ``eps * |loss| / step`` (about ``1e-10 * |loss|``) absolute roundoff, so
    smaller entries cannot be resolved to relative precision.
    """
    loss = loss_fn()
    grads = ad.backward(loss)
    fd = central_difference(loss_fn, params, step)
    ours = [grads.get(p, np.zeros_like(p.value)) for p in params]
    floor = 1e-4 * max(1.0, abs(loss.item()))
    return max(max_relative_error(g, g_fd, floor) for g, g_fd in zip(ours, fd))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Remember one acceptance line for the terminal summary and echo it."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
