"""Shared test helpers: a central finite-difference gradient checker."""

import numpy as np
import pytest
from hypothesis import settings

from matchdiff import tensor
from matchdiff.tensor import DiffValue

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def fd_grad_check(build, leaves: dict[str, DiffValue], h: float = 1e-4, tol: float = 1e-4) -> float:
    """Compare backward-pass gradients against central finite differences.

    build() must construct a fresh scalar loss from the current leaf data each
    call. Returns the worst relative error max|analytic - numeric| /
    max(max|numeric|, 1e-6) over all leaves, asserting it is within tol.
    """
    loss = build()
    assert loss.data.ndim == 0, "gradient check needs a scalar loss"
    tensor.zero_grad(leaves.values())
    tensor.backward(loss)
    analytic = {name: np.array(leaf.grad, copy=True) for name, leaf in leaves.items()}
    worst = 0.0
    for name, leaf in leaves.items():
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            hi = float(build().data)
            flat[i] = saved - h
            lo = float(build().data)
            flat[i] = saved
            num_flat[i] = (hi - lo) / (2.0 * h)
        rel = np.abs(analytic[name] - numeric).max() / max(np.abs(numeric).max(), 1e-6)
        assert rel <= tol, f"gradient mismatch on {name}: rel {rel:.3e} > {tol:.1e}"
        worst = max(worst, rel)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
