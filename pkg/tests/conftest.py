from pathlib import Path
import gzip
import struct
import sys

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from hierarchy import build_hierarchy, make_scan_plan  # noqa: E402
from schemas import LayerSpec, NodeDefaults  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running oracle and benchmark checks")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


SMALL_LAYERS = [
    LayerSpec(grid=(2, 2), centroids_per_node=3, fan_in=4),
    LayerSpec(grid=(1, 1), centroids_per_node=3),
]


def small_hierarchy(seed: int = 0, **node_fields):
    """2x2 / 1x1 hierarchy over a 4x4 window of 2x2 patches"""
    return build_hierarchy(SMALL_LAYERS, NodeDefaults(**node_fields), patch=(2, 2), seed=seed)


@pytest.fixture
def small_plan():
    # 6x6 image, 4x4 window -> 9 movements, samples at 0, 4, 8
    return make_scan_plan((6, 6), (4, 4), stride=1, sample_interval=4)


def idx_bytes(magic: int, dims: tuple[int, ...], payload: bytes) -> bytes:
    return struct.pack(">I", magic) + struct.pack(">" + "I" * len(dims), *dims) + payload


def write_idx(path: Path, magic: int, array: np.ndarray, compress: bool = False) -> Path:
    data = idx_bytes(magic, array.shape, np.ascontiguousarray(array, dtype=np.uint8).tobytes())
    if compress:
        path = path.with_name(path.name + ".gz")
        with gzip.open(path, "wb") as f:
            f.write(data)
    else:
        path.write_bytes(data)
    return path


def fake_mnist(data_dir: Path, n_train: int, n_test: int, seed: int = 0) -> Path:
    """random 28x28 digits; class c brightens row band c so labels carry signal"""
    r = np.random.default_rng(seed)
    data_dir.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("t10k", n_test)):
        labels = r.integers(0, 10, size=n).astype(np.uint8)
        images = r.integers(0, 40, size=(n, 28, 28)).astype(np.uint8)
        for i, c in enumerate(labels):
            images[i, 2 + 2 * c : 4 + 2 * c, 4:24] = 255
        write_idx(data_dir / f"{split}-images-idx3-ubyte", 0x00000803, images, compress=split == "train")
        write_idx(data_dir / f"{split}-labels-idx1-ubyte", 0x00000801, labels)
    return data_dir
