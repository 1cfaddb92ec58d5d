"""Session fixtures: the trained pad model and its evaluation records.

Training four direction models for 150 epochs takes a few minutes, so the
model and the padding scores derived from it are built once per session and
shared by the acceptance tests.
"""

import numpy as np
import pytest

from capad.bench import eval_padding
from capad.net import NetConfig
from capad.padding import METHOD_TAGS, PaddingMethod
from capad.train import PadModel, TrainConfig, train_direction

from synthetic import EVAL_SEED, TRAIN_SEED, photo_corpus

FIXTURE_NET = NetConfig(depth=2, base_channels=16, in_channels=3, seed=0)
FIXTURE_P = 3
FIXTURE_M = 20


def fixture_train_config(side_index: int) -> TrainConfig:
    # desk-scale recipe: a larger lr and an L2 loss converge far enough on
    # 24 images for the trained model to hold its own
    return TrainConfig(lr=1e-3, batch_size=8, epochs=150, seed=100 + side_index,
                       loss_norm="l2", border_only=True)


@pytest.fixture(scope="session")
def photo_train_corpus():
    return photo_corpus(24, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def photo_eval_corpus():
    return photo_corpus(20, seed=EVAL_SEED)


@pytest.fixture(scope="session")
def trained_model(photo_train_corpus):
    nets = {}
    for i, side in enumerate(("left", "right", "top", "bottom")):
        nets[side], _ = train_direction(photo_train_corpus, side,
                                        fixture_train_config(i), FIXTURE_NET,
                                        p=FIXTURE_P, m=FIXTURE_M)
    return PadModel(**nets, p=FIXTURE_P, m=FIXTURE_M)


@pytest.fixture(scope="session")
def padding_records(trained_model, photo_eval_corpus):
    """eval_padding records for all seven methods at pad widths 1 and 3."""
    methods = [PaddingMethod(tag, FIXTURE_P,
                             trained_model if tag == "ca" else None)
               for tag in METHOD_TAGS]
    return {p: eval_padding(photo_eval_corpus, methods, p, crop=64,
                            overlap="1/3", m=FIXTURE_M)
            for p in (1, FIXTURE_P)}
