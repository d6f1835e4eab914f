import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from selfaux.datasets import write_idx

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """IDX files built from the 5000-digit MNIST subset bundled with mlxtend (4000 train / 1000 test sources)."""
    mlxtend_data = pytest.importorskip("mlxtend.data")
    from sklearn.model_selection import train_test_split

    X, y = mlxtend_data.mnist_data()
    Xtr, Xte, ytr, yte = train_test_split(X, y, test_size=1000, stratify=y, random_state=0)
    out = tmp_path_factory.mktemp("mnist")
    write_idx(out / MNIST_FILES["train_images"], Xtr.reshape(-1, 28, 28).astype(np.uint8))
    write_idx(out / MNIST_FILES["train_labels"], ytr)
    write_idx(out / MNIST_FILES["test_images"], Xte.reshape(-1, 28, 28).astype(np.uint8))
    write_idx(out / MNIST_FILES["test_labels"], yte)
    return out
