import numpy as np
import pytest

from spade import tensor as T


def fd_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar-valued f at x (64-bit)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / (np.abs(a) + 1e-8)))


def check_gradients(build_loss, params: dict[str, T.Tensor], tol: float = 1e-4):
    """Compare tape gradients of build_loss() against finite differences
    w.r.t. each named float64 parameter tensor."""
    for p in params.values():
        p.grad = None
    loss = build_loss()
    T.backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    for name, p in params.items():
        def f(x, p=p):
            old = p.data
            p.data = x
            try:
                return float(build_loss().data)
            finally:
                p.data = old
        numeric = fd_gradient(f, p.data.copy().astype(np.float64))
        err = rel_err(analytic[name], numeric)
        assert err <= tol, f"gradient mismatch for {name}: rel err {err:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
