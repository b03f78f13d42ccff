import numpy as np
import pytest

from simtext import data, network


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def small_spec(**overrides) -> network.NetworkSpec:
    """Downscaled architecture used by gradient and training tests."""
    base = dict(input_h=8, input_w=8, conv1_channels=2, conv1_kernel=5,
                conv2_channels=3, conv2_kernel=1, ip_width=7,
                relu_head_dim=4, feat_dim=3)
    base.update(overrides)
    return network.NetworkSpec(**base)


def toy_sample(id_: str, label: str, pixels: np.ndarray) -> data.ImageSample:
    return data.ImageSample(id=id_, pixels=pixels, label=label, source="synthetic")


def two_class_toy(n_per_class: int = 6, size: int = 8, seed: int = 0):
    """Separable two-class image set: top-band vs bottom-band patterns."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_per_class):
        a = np.zeros((1, size, size))
        a[0, : size // 2] = 0.8 + 0.2 * rng.random((size // 2, size))
        samples.append(toy_sample(f"top-{i}", "top", np.clip(a, 0, 1)))
        b = np.zeros((1, size, size))
        b[0, size // 2 :] = 0.8 + 0.2 * rng.random((size // 2, size))
        samples.append(toy_sample(f"bot-{i}", "bottom", np.clip(b, 0, 1)))
    return samples
