import numpy as np
import pytest

from tbvi import datasets as D


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    """Synthetic IDX files laid out like a real data directory.

    The structured-blob images stand in for the handwritten datasets in
    desk-scale runs; real files (when present under the same names) go
    through the identical path.
    """
    root = tmp_path_factory.mktemp("data")
    D.write_imageset_file(D.synthetic_imageset(128, seed=11, source_name="mnist", split="train"), root, "mnist", "train")
    D.write_imageset_file(D.synthetic_imageset(64, seed=12, source_name="mnist", split="test"), root, "mnist", "test")
    D.write_imageset_file(D.synthetic_imageset(96, seed=13, source_name="omniglot", split="train"), root, "omniglot", "train")
    D.write_imageset_file(D.synthetic_imageset(48, seed=14, source_name="omniglot", split="test"), root, "omniglot", "test")
    return root


@pytest.fixture(scope="session")
def mnist_train(data_dir):
    return D.load_imageset(data_dir, "mnist", "train")


@pytest.fixture(scope="session")
def mnist_test(data_dir):
    return D.load_imageset(data_dir, "mnist", "test")


@pytest.fixture()
def rng():
    return np.random.default_rng(20240811)
