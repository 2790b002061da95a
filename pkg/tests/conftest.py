from __future__ import annotations

import numpy as np
import pytest

from cyclet.config import parse_config

TINY_INI = """
[run]
seed = 3
out = runs

[dataset]
root = data
num_classes = 3
image_side = 16
train_per_class = 6
val_per_class = 3
test_per_class = 3

[teacher]
resize_side = 18
input_side = 16
channels = 4, 8, 8, 8
blocks_per_stage = 1
epochs_a = 1
epochs_b = 1
batch_size = 8

[student]
resize_side = 10
input_side = 8
width_multiplier = 0.25
hidden_units = 8

[ssda]
tau_teacher = 0.5
tau_student = 0.4

[cycle]
epochs = 1, 2, 1
batch_size = 8

[eval]
iterations = 5
warmup = 1

[ablate]
seeds = 2
"""


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path):
    """A minutes-free configuration rooted in a fresh temporary directory."""
    (tmp_path / "tiny.ini").write_text(TINY_INI, encoding="utf-8")
    return parse_config(TINY_INI, tmp_path, str(tmp_path / "tiny.ini"))


@pytest.fixture(scope="session")
def tiny_dataset_root(tmp_path_factory):
    from cyclet.data import generate_synthetic

    cfg = parse_config(TINY_INI, ".")
    root = tmp_path_factory.mktemp("tiny_data")
    generate_synthetic(cfg.synth_spec(), root)
    return root
