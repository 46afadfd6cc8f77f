import numpy as np
import pytest

from attnfd import tensor as T
from attnfd.tensor import Tensor


def numeric_gradient_check(fn, arrays, seed=0, eps=1e-5, rtol=1e-4, atol=1e-7):
    """Compare backward() against central differences of sum(w * fn(...))."""
    rng = np.random.default_rng(seed + 1000)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    params = [Tensor.parameter(a) for a in arrays]
    out = fn(*params)
    weights = np.asarray(rng.normal(size=out.shape))
    T.backward(T.sum_(out * Tensor(weights)))

    for i, (p, a) in enumerate(zip(params, arrays)):
        numeric = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            values = []
            for sign in (1.0, -1.0):
                shifted = [x.copy() for x in arrays]
                shifted[i][idx] += sign * eps
                with T.no_grad():
                    values.append(float((fn(*[Tensor(x) for x in shifted]).data * weights).sum()))
            numeric[idx] = (values[0] - values[1]) / (2 * eps)
        analytic = p.grad if p.grad is not None else np.zeros_like(a)
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol, err_msg=f"input {i}")


@pytest.fixture
def gradcheck():
    return numeric_gradient_check


@pytest.fixture
def fixtures_dir():
    from pathlib import Path

    return Path(__file__).parent / "fixtures"
