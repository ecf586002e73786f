import numpy as np
import pytest

from hybridad.autodiff import Tensor, no_grad


def central_diff(f, t, eps=1e-5):
    """Finite-difference gradient of scalar ``f()`` w.r.t. ``t.data``, written
    independently of the library helper so the two can check each other."""
    out = np.empty_like(t.data)
    flat = t.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = float(f().data)
            flat[i] = keep - eps
            down = float(f().data)
            flat[i] = keep
            out.reshape(-1)[i] = (up - down) / (2 * eps)
    return out


def max_rel_err(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_grads(f, tensors, eps=1e-5):
    for t in tensors:
        t.grad = None
    f().backward()
    worst = 0.0
    for t in tensors:
        g = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        worst = max(worst, max_rel_err(g, central_diff(f, t, eps)))
    return worst


def projected(make, rng):
    r = Tensor(rng.standard_normal(make().shape))
    return lambda: (make() * r).sum()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
