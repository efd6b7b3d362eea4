import numpy as np
import pytest

from distillwsd.tensor import Parameter, Tensor


def finite_difference_check(build_loss, params, h=1e-6, rtol=1e-5, atol=1e-8):
    """Compare autodiff grads of a scalar loss against central differences.

    `build_loss()` must rebuild the graph from the current parameter values
    and return the scalar loss Tensor.  `params` is a list of Parameter or
    Tensor leaves (float64).  Returns the worst relative error seen.
    """
    tensors = [p.tensor if isinstance(p, Parameter) else p for p in params]
    for t in tensors:
        assert t.dtype == np.float64, "gradient checks need float64"
        t.grad = None
    loss = build_loss()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    # Pass when |autodiff - numeric| < atol + rtol * scale: the absolute floor
    # absorbs central-difference cancellation noise on near-zero gradients.
    worst = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss().item()
            flat[i] = orig - h
            down = build_loss().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            diff = abs(gflat[i] - numeric)
            tol = atol + rtol * max(abs(numeric), abs(gflat[i]))
            worst = max(worst, diff / tol)
            assert diff < tol, (
                f"grad mismatch at {t.shape} index {i}: autodiff {gflat[i]:.8g} "
                f"vs numeric {numeric:.8g} (diff {diff:.2e}, tol {tol:.2e})")
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=np.float64)
