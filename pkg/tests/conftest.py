import json
import os

import pytest

from camrefine.backend import load_model
from camrefine.dataio import load_dataset

DATA = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures", "data")


def data_path(*parts: str) -> str:
    return os.path.join(DATA, *parts)


@pytest.fixture(scope="session")
def goldens():
    with open(data_path("goldens", "goldens.json")) as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def twoblob_handle():
    return load_model(data_path("models", "twoblob.onnx"),
                      data_path("models", "twoblob.manifest"))


@pytest.fixture(scope="session")
def triclass_handle():
    return load_model(data_path("models", "triclass.onnx"),
                      data_path("models", "triclass.manifest"))


@pytest.fixture(scope="session")
def const_handle():
    return load_model(data_path("models", "const.onnx"),
                      data_path("models", "const.manifest"))


@pytest.fixture(scope="session")
def train_dataset():
    return load_dataset(
        data_path("lists", "train.txt"),
        data_path("images"),
        label_dir=data_path("labels"),
        saliency_dir=data_path("saliency"),
        class_file=data_path("lists", "train_classes.txt"),
        class_names=("red", "green", "blue"),
    )
