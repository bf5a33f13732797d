import numpy as np
import pytest

from asapseg.autograd import Tensor, fresh_tape, no_grad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _clean_tape():
    with fresh_tape():
        yield


def warm_batch_norm(model, rng, hw=(32, 32), batch=4):
    """One multi-sample training pass so eval-mode batch norm is defined."""
    with no_grad(), fresh_tape():
        model(Tensor(rng.normal(size=(batch, 3, *hw))), training=True)
    return model


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """24 small scenes with train/val manifests, shared across tests."""
    from asapseg.data import SceneSpec, write_dataset
    root = tmp_path_factory.mktemp("tinyds")
    write_dataset(str(root), SceneSpec(width=64, height=32, seed=7), 24)
    return str(root)
