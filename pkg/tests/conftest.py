import numpy as np
import pytest

from embdistill.lattice import EmissionLattice


def make_random_lattice(rng: np.random.Generator, T: int, N: int, K: int) -> EmissionLattice:
    """Random normalized emission lattice with random target tokens."""
    logits = rng.normal(size=(T, N + 1, K))
    log_probs = logits - np.log(np.sum(np.exp(logits), axis=2, keepdims=True))
    tokens = rng.integers(1, K, size=N)
    return EmissionLattice(log_probs=log_probs, tokens=tokens)


def make_uniform_lattice(T: int, N: int, K: int) -> EmissionLattice:
    """Every node's emission distribution uniform over the K symbols."""
    log_probs = np.full((T, N + 1, K), -np.log(K))
    return EmissionLattice(log_probs=log_probs, tokens=np.ones(N, dtype=np.int64))


def fd_gradient(fn, array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar fn w.r.t. one array, in place."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + h
        f_plus = fn()
        array[idx] = orig - h
        f_minus = fn()
        array[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, name: str = ""):
    """rtol pins the relative-error criterion; atol absorbs the ~1e-9 FD
    roundoff floor of central differences on O(1..50) loss values."""
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8, err_msg=name)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
