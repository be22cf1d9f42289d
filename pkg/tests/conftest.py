import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def fresh_graph():
    """Each test starts with an empty autodiff tape."""
    from qcnn.tensor import get_graph

    g = get_graph()
    g.clear()
    g.recording = True
    yield
    g.clear()
    g.recording = True


def _data_dir():
    return os.environ.get("QCNN_DATA_DIR", os.path.join(os.getcwd(), "data"))


@pytest.fixture(scope="session")
def mnist_or_skip():
    """Real MNIST IDX files, or skip when they are not on disk."""
    from qcnn import data as qdata
    from qcnn.errors import DataNotFoundError

    try:
        return qdata.load_mnist(_data_dir())
    except DataNotFoundError as e:
        pytest.skip(f"MNIST not available: {e}")


@pytest.fixture(scope="session")
def cifar10_or_skip():
    from qcnn import data as qdata
    from qcnn.errors import DataNotFoundError

    try:
        return qdata.load_cifar10(_data_dir())
    except DataNotFoundError as e:
        pytest.skip(f"CIFAR-10 not available: {e}")


@pytest.fixture(scope="session")
def digits28():
    """Offline 28x28 digit corpus built from sklearn's bundled 8x8 digits.

    Stand-in for dataset-shaped smoke tests on machines without the real
    MNIST files; images are kron-upsampled to 24x24 and zero-padded to
    28x28, then standardized like the MNIST loader output.
    """
    from sklearn.datasets import load_digits

    from qcnn import data as qdata

    x, y = load_digits(return_X_y=True)
    imgs = x.reshape(-1, 8, 8).astype(np.float32) / 16.0
    imgs = np.kron(imgs, np.ones((3, 3), dtype=np.float32))
    imgs = np.pad(imgs, ((0, 0), (2, 2), (2, 2)))[:, None, :, :]
    imgs = (imgs - imgs.mean()) / imgs.std()
    labels = y.astype(np.int64)
    split = 1500
    train = qdata.Dataset(images=imgs[:split], labels=labels[:split], split="train", name="digits")
    test = qdata.Dataset(images=imgs[split:], labels=labels[split:], split="test", name="digits")
    return train, test
