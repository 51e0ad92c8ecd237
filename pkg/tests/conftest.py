"""Shared fixtures: tiny trained models and handcrafted probe classifiers."""
import numpy as np
import pytest
import torch

from patchbench.model_zoo import (Classifier, TrainConfig, make_classifier,
                                  make_shapes_dataset, train_classifier)


@pytest.fixture(scope="session")
def toy_dataset():
    return make_shapes_dataset(700, side=64, num_classes=10, seed=123)


@pytest.fixture(scope="session")
def toy_test_dataset():
    return make_shapes_dataset(300, side=64, num_classes=10, seed=124)


@pytest.fixture(scope="session")
def tiny_classifier(toy_dataset):
    """Small trained convnet used by saliency/detector/pipeline tests."""
    return train_classifier(toy_dataset, TrainConfig(
        epochs=16, seed=7, architecture="convnet4-w8"))


def channel_sum_classifier(input_side: int = 16) -> Classifier:
    """3-class linear probe: logit c = sum of channel c. Fully analytic."""
    clf = make_classifier("linear", 3, input_side, seed=0)
    with torch.no_grad():
        w = torch.zeros(3, 3 * input_side * input_side)
        n = input_side * input_side
        # flatten order is CHW: channel blocks are contiguous
        for c in range(3):
            w[c, c * n: (c + 1) * n] = 1.0
        clf.module.fc.weight.copy_(w)
        clf.module.fc.bias.zero_()
    return clf


@pytest.fixture()
def probe_classifier():
    return channel_sum_classifier(16)
