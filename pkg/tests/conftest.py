import numpy as np
import pytest

from centroid_rehearsal import ContinualConfig, SplitGaussianSpec, make_split_gaussian


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_benchmark():
    """Two small tasks, plain Gaussian classes; fast enough for unit tests."""
    spec = SplitGaussianSpec(tasks=2, classes_per_task=2, input_dim=8,
                             sigma=0.4, separation=3.0, train_per_class=40,
                             test_per_class=20)
    return make_split_gaussian(spec, seed=7)


@pytest.fixture
def tiny_config():
    return ContinualConfig(seed=3, hidden_dims=(12,), feature_dim=6,
                           epsilon=2.0, memory_per_class=4, batch_size=8)


def numeric_param_gradient(loss_fn, arrays, step=1e-5):
    """Central finite differences of ``loss_fn()`` w.r.t. the given arrays.

    ``loss_fn`` must read the arrays in place; they are perturbed and
    restored entry by entry.
    """
    grads = []
    for A in arrays:
        g = np.zeros_like(A)
        flat = A.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            g.ravel()[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def relative_agreement(analytic, numeric, min_mag=1e-8, tol=1e-4):
    """Fraction of non-negligible coordinates where both gradients agree."""
    a = np.concatenate([g.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    mask = np.abs(n) > min_mag
    if not mask.any():
        return 1.0
    rel = np.abs(a[mask] - n[mask]) / np.maximum(np.abs(n[mask]), min_mag)
    return float((rel < tol).mean())
