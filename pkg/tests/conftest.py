import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_fd_check(fn, x, probes, eps=1e-6, rng=None):
    """Compare autograd gradient of scalar ``fn(x)`` with central differences.

    Returns the relative errors at ``probes`` randomly chosen coordinates.
    """
    rng = rng or np.random.default_rng(0)
    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach().clone()
    flat = x.detach().view(-1)
    idx = rng.choice(flat.numel(), size=min(probes, flat.numel()), replace=False)
    errs = []
    for k in idx:
        xp = flat.clone()
        xm = flat.clone()
        xp[k] += eps
        xm[k] -= eps
        with torch.no_grad():
            fd = (fn(xp.view_as(x)) - fn(xm.view_as(x))).item() / (2 * eps)
        bp = grad.view(-1)[k].item()
        errs.append(abs(fd - bp) / max(abs(fd), abs(bp), 1e-8))
    return np.asarray(errs)


ACCEPTANCE = {}


def record_criterion(n, title, ok, detail=""):
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
