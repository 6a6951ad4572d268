import numpy as np
import pytest

from albumgen import tensor as T


@pytest.fixture(autouse=True)
def _finite_checks():
    """Most tests run with NaN/Inf tripwires on; perf-sensitive ones opt out."""
    T.set_debug_checks(True)
    yield
    T.set_debug_checks(False)


def finite_difference(fn, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar fn at x, independent of autograd.

    fn maps an ndarray to a python float; differences are accumulated in
    float64 even though fn itself evaluates in float32.
    """
    x = np.asarray(x, dtype=np.float32)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||n||, tiny): a vector-level relative error."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(build_loss, params: dict, tol: float = 1e-3, step: float = 1e-3):
    """Compare autograd grads of build_loss() against central differences.

    build_loss must close over `params` (name -> Tensor) and return a scalar
    Tensor when called with no arguments. Per-op checks use step 1e-3;
    whole-module checks use step 1e-2, where float32 roundoff in the oracle
    itself stays well under the 2e-3 acceptance tolerance.
    """
    for p in params.values():
        p.grad = None
    loss = build_loss()
    T.backward(loss)
    failures = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)

        def f(arr, _p=p):
            old = _p.data
            _p.data = np.asarray(arr, dtype=np.float32)
            try:
                return build_loss().item()
            finally:
                _p.data = old

        numeric = finite_difference(f, p.data.copy(), step=step)
        err = relative_grad_error(analytic, numeric)
        if err > tol:
            failures[name] = err
    assert not failures, f"gradient mismatches: {failures}"
