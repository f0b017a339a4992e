import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from cnndecomp.graph import (
    LabeledDataset, LayerKind, LayerSpec, ModelGraph, Split, load_dataset, load_model,
    validate_model,
)
from cnndecomp.tensors import ConvParams, Padding

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "..", "fixtures")


def f32(values):
    return np.asarray(values, dtype=np.float32)


def make_dense_model(hidden_w, hidden_b, out_w, out_b):
    """input (1,1,n) -> flatten -> dense -> relu -> dense -> softmax"""
    n_in = hidden_w.shape[0]
    model = ModelGraph(
        layers=[
            LayerSpec(LayerKind.FLATTEN, (-1,)),
            LayerSpec(LayerKind.DENSE, (0,), weights=f32(hidden_w), bias=f32(hidden_b)),
            LayerSpec(LayerKind.RELU, (1,)),
            LayerSpec(LayerKind.DENSE, (2,), weights=f32(out_w), bias=f32(out_b)),
            LayerSpec(LayerKind.SOFTMAX, (3,)),
        ],
        input_shape=(1, 1, n_in),
        class_count=out_w.shape[1],
    )
    validate_model(model)
    return model


def make_small_cnn(seed=0, class_count=4, padding=Padding.WITH):
    """input (4,4,2) -> conv3x3x2x3 -> relu -> maxpool2 -> flatten -> dense -> relu -> dense -> softmax"""
    rng = np.random.default_rng(seed)
    conv = ConvParams(
        kernel=f32(rng.normal(0, 0.5, (3, 3, 2, 3))),
        bias=f32(rng.normal(0, 0.2, 3)),
        stride=1,
        padding=padding,
    )
    model = ModelGraph(
        layers=[
            LayerSpec(LayerKind.CONV2D, (-1,), conv=conv),
            LayerSpec(LayerKind.RELU, (0,)),
            LayerSpec(LayerKind.MAXPOOL, (1,), pool=2),
            LayerSpec(LayerKind.FLATTEN, (2,)),
            LayerSpec(LayerKind.DENSE, (3,),
                      weights=f32(rng.normal(0, 0.5, (12, 8))),
                      bias=f32(rng.normal(0, 0.2, 8))),
            LayerSpec(LayerKind.RELU, (4,)),
            LayerSpec(LayerKind.DENSE, (5,),
                      weights=f32(rng.normal(0, 0.5, (8, class_count))),
                      bias=f32(rng.normal(0, 0.2, class_count))),
            LayerSpec(LayerKind.SOFTMAX, (6,)),
        ],
        input_shape=(4, 4, 2),
        class_count=class_count,
    )
    validate_model(model)
    return model


def make_residual_cnn(seed=0, class_count=4):
    """4x4x2 input with one residual block (conv-relu-conv-add-relu)."""
    rng = np.random.default_rng(seed)

    def conv(c_in, c_out):
        return ConvParams(kernel=f32(rng.normal(0, 0.4, (3, 3, c_in, c_out))),
                          bias=f32(rng.normal(0, 0.2, c_out)),
                          stride=1, padding=Padding.WITH)

    model = ModelGraph(
        layers=[
            LayerSpec(LayerKind.CONV2D, (-1,), conv=conv(2, 4)),   # 0
            LayerSpec(LayerKind.RELU, (0,)),                       # 1
            LayerSpec(LayerKind.CONV2D, (1,), conv=conv(4, 4)),    # 2
            LayerSpec(LayerKind.RELU, (2,)),                       # 3
            LayerSpec(LayerKind.CONV2D, (3,), conv=conv(4, 4)),    # 4
            LayerSpec(LayerKind.ADD, (4, 1)),                      # 5
            LayerSpec(LayerKind.RELU, (5,)),                       # 6
            LayerSpec(LayerKind.AVGPOOL, (6,), pool=2),            # 7
            LayerSpec(LayerKind.FLATTEN, (7,)),                    # 8
            LayerSpec(LayerKind.DENSE, (8,),
                      weights=f32(rng.normal(0, 0.5, (16, class_count))),
                      bias=f32(rng.normal(0, 0.2, class_count))),  # 9
            LayerSpec(LayerKind.SOFTMAX, (9,)),                    # 10
        ],
        input_shape=(4, 4, 2),
        class_count=class_count,
    )
    validate_model(model)
    return model


def make_dataset(model, per_class=30, seed=1, name="toy", split=Split.TRAIN):
    """Random inputs with interleaved synthetic labels (CI/TI only read labels)."""
    rng = np.random.default_rng(seed)
    n = per_class * model.class_count
    images = rng.normal(0, 1, (n, *model.input_shape)).astype(np.float32)
    labels = np.tile(np.arange(model.class_count, dtype=np.int32), per_class)
    return LabeledDataset(name=name, images=images, labels=labels,
                          split=split, class_count=model.class_count)


def fixture_path(name):
    return os.path.join(FIXTURE_DIR, name)


def require_fixture(name):
    path = fixture_path(name)
    if not os.path.exists(path):
        pytest.fail(f"missing fixture {name}; run the exporter (see exporter/README.md)")
    return path


@pytest.fixture(scope="session")
def plain_fixture():
    model = load_model(require_fixture("plain-a.cnnmod"))
    train = load_dataset(require_fixture("syntha.train.cnnds"))
    test = load_dataset(require_fixture("syntha.test.cnnds"))
    return model, train, test


@pytest.fixture(scope="session")
def resnet_fixture():
    model = load_model(require_fixture("resnet-a.cnnmod"))
    train = load_dataset(require_fixture("syntha.train.cnnds"))
    test = load_dataset(require_fixture("syntha.test.cnnds"))
    return model, train, test
