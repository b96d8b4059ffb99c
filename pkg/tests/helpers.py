"""Shared constructions and independent oracles for the test suite."""
import numpy as np

from poflab.nn import Batch, MlpSpec, init_params


def random_batch(spec: MlpSpec, n: int, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, spec.input_dim))
    if spec.loss_kind == "softmax-cross-entropy":
        y = rng.integers(0, spec.output_dim, size=n)
    else:
        y = rng.normal(size=(n, spec.output_dim))
    return Batch(x, y)


def linear_quadratic_setup(n: int = 6, seed: int = 0):
    """Two-layer tanh net with squared error: the classifier-restricted loss is exactly quadratic."""
    spec = MlpSpec((3, 4, 2), activation="tanh", loss_kind="squared-error")
    split = spec.default_split()
    params = init_params(spec, split, seed)
    return spec, split, params, random_batch(spec, n, seed + 1)


def fd_gradient_check(params, spec, batch, n_coords=100, step=1e-5, seed=0, floor=1e-6):
    """Max relative error of the analytic gradient against central differences.

    The denominator is floored at ``floor`` so coordinates whose gradient is
    essentially zero do not turn rounding noise into a huge relative error.
    """
    from poflab.nn import forward_loss, grad
    g = grad(params, spec, batch).values
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(params), size=min(n_coords, len(params)), replace=False)
    worst = 0.0
    for i in idx:
        e = np.zeros(len(params))
        e[i] = step
        num = (forward_loss(params.with_values(params.values + e), spec, batch)
               - forward_loss(params.with_values(params.values - e), spec, batch)) / (2 * step)
        worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), floor))
    return worst


def fd_hessian(loss, x, h=1e-4):
    """Dense Hessian from second differences of a scalar loss (no gradients used)."""
    n = len(x)
    H = np.empty((n, n))
    f0 = loss(x)
    E = np.eye(n) * h
    for i in range(n):
        H[i, i] = (loss(x + E[i]) - 2 * f0 + loss(x - E[i])) / h**2
        for j in range(i + 1, n):
            H[i, j] = H[j, i] = (loss(x + E[i] + E[j]) - loss(x + E[i] - E[j])
                                 - loss(x - E[i] + E[j]) + loss(x - E[i] - E[j])) / (4 * h * h)
    return H
