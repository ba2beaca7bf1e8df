import numpy as np
import pytest

from bitro import numerics as nx


def central_diff(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``fn`` at ``x`` by central differences."""
    x = np.array(x, dtype=float)
    out = np.zeros_like(x)
    flat, grad = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn(x)
        flat[i] = keep - h
        down = fn(x)
        flat[i] = keep
        grad[i] = (up - down) / (2 * h)
    return out


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def grad_check(build, inputs: dict, h: float = 1e-5, joint: bool = False) -> float:
    """Largest relative error between autodiff and finite differences over ``inputs``.

    ``build(tensors)`` maps a name -> Tensor dict to a scalar Tensor. By
    default each input is scored on its own; ``joint`` scores the concatenated
    gradient of all inputs, so an input whose gradient is exactly zero is
    judged against the scale of the others instead of against rounding noise.
    """
    leaves = {k: nx.Tensor(v, requires_grad=True) for k, v in inputs.items()}
    grads = nx.backward(build(leaves), leaves)
    auto, numeric = [], []
    for name, value in inputs.items():
        def scalar(v, name=name):
            args = {k: nx.Tensor(v if k == name else inputs[k]) for k in inputs}
            return float(build(args).data)
        auto.append(np.ravel(grads[name]))
        numeric.append(np.ravel(central_diff(scalar, value, h)))
    if joint:
        return rel_error(np.concatenate(auto), np.concatenate(numeric))
    return max(rel_error(a, b) for a, b in zip(auto, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_ARCH = dict(dim=8, gat_layers=1, gat_heads=2, k_neighbors=4, n_pos=32, trf_depth=1, trf_heads=2)


@pytest.fixture(scope="session")
def tiny_world():
    from bitro.synth import PlantedWorld

    return PlantedWorld(seed=0, d=6, g=5, k_types=3)


@pytest.fixture(scope="session")
def tiny_samples(tiny_world):
    from bitro.synth import simulate

    return [s.sample for s in simulate(tiny_world, 3, n_spots=9, cells_per_spot=4)]


@pytest.fixture
def tiny_setup(tiny_samples):
    """(tree, train_bags, val_bags, preprocessor) for a small spot model."""
    from bitro.model import model_config
    from bitro.pipeline import Preprocessor, new_model, split_train_val

    pre = Preprocessor.fit(tiny_samples, patch_px=224, n_clusters=3)
    tree = new_model(pre, tiny_samples, seed=0, **TINY_ARCH)
    bags = pre.prepare(tiny_samples, model_config(tree))
    train, val = split_train_val(bags, 0.2, seed=0)
    return tree, train, val, pre
