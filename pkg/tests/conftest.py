import numpy as np
import pytest

from genreplay import tensor as T
from genreplay.tensor import Tensor


def numeric_gradient(build_loss, arrays, index, eps=1e-5):
    """Central finite differences of build_loss w.r.t. arrays[index].

    ``build_loss`` maps a list of Tensors to a scalar Tensor; inputs are
    rebuilt fresh for every probe so no graph state leaks between evals.
    """
    base = [np.asarray(a, dtype=np.float64) for a in arrays]
    grad = np.zeros_like(base[index])
    flat = grad.reshape(-1)
    for j in range(flat.size):
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[index].reshape(-1)[j] += eps
        minus[index].reshape(-1)[j] -= eps
        f_plus = build_loss([Tensor(a) for a in plus]).item()
        f_minus = build_loss([Tensor(a) for a in minus]).item()
        flat[j] = (f_plus - f_minus) / (2 * eps)
    return grad


def gradcheck(build_loss, arrays, rtol=1e-3, atol=1e-7, eps=1e-5):
    """Assert analytic gradients match central differences at 64-bit."""
    base = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in base]
    loss = build_loss(leaves)
    T.backward(loss)
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numeric_gradient(build_loss, base, i, eps=eps)
        np.testing.assert_allclose(
            analytic, numeric, rtol=rtol, atol=atol,
            err_msg=f"gradient mismatch on input {i}",
        )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
