import numpy as np
import pytest

from castling.attention import KernelKind
from castling.data import generate_dataset, patchify, tokens_per_image
from castling.model import ModelConfig, TinyViT
from castling.tensor import ConfigError


def test_same_seed_same_bytes():
    a, b = generate_dataset(40, 4, 16, seed=3), generate_dataset(40, 4, 16, seed=3)
    assert a.to_bytes() == b.to_bytes() and a.digest() == b.digest()
    assert generate_dataset(40, 4, 16, seed=4).digest() != a.digest()


def test_class_balance():
    d = generate_dataset(100, 2, 16, seed=0)
    assert np.bincount(d.labels).tolist() == [50, 50]
    counts = np.bincount(generate_dataset(103, 4, 16, seed=1).labels)
    assert counts.max() - counts.min() <= 1


def test_split_is_ninety_ten_and_disjoint():
    d = generate_dataset(200, 4, 16, seed=0)
    assert len(d.val_idx) == 20 and len(d.train_idx) == 180
    assert not set(d.val_idx) & set(d.train_idx)


def test_invalid_geometry():
    with pytest.raises(ConfigError):
        generate_dataset(10, 4, 6)
    with pytest.raises(ConfigError):
        generate_dataset(10, 9, 16)
    with pytest.raises(ConfigError):
        generate_dataset(10, 1, 16)


def test_tokens_per_image():
    assert tokens_per_image(16, 4) == 16
    assert patchify(np.zeros((2, 16, 16)), 4).shape == (2, 16, 16)
    with pytest.raises(ConfigError):
        tokens_per_image(18, 4)


def test_patchify_row_major():
    img = np.arange(16.0).reshape(1, 4, 4)
    p = patchify(img, 2)
    assert p[0, 0].tolist() == [0, 1, 4, 5] and p[0, 1].tolist() == [2, 3, 6, 7]


@pytest.mark.parametrize("kernel", [KernelKind.LINEAR_ANGULAR, KernelKind.EXACT_SOFTMAX])
def test_model_logit_shape_and_determinism(kernel):
    cfg = ModelConfig(image_size=16, kernel=kernel, use_dwconv=True, use_aux=True)
    x = generate_dataset(8, 4, 16, seed=0).images
    a, b = TinyViT(cfg, seed=1)(x, 0.02), TinyViT(cfg, seed=1)(x, 0.02)
    assert a.logits.shape == (8, 4)
    np.testing.assert_array_equal(a.logits.data, b.logits.data)
    assert len(a.traces) == cfg.depth and all(t is not None for t in a.traces)


def test_model_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(image_size=18, patch=4)
    with pytest.raises(ConfigError):
        ModelConfig(dim=30, heads=4)


def test_castled_copy_shares_no_state():
    m = TinyViT(ModelConfig(image_size=16, use_aux=True), seed=0)
    c = m.castled()
    assert not c.cfg.use_aux and m.cfg.use_aux
    c.parameters()[0].data += 1.0
    assert not np.array_equal(c.parameters()[0].data, m.parameters()[0].data)
