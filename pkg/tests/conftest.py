"""Session fixtures: the expensive training runs are shared between the unit
tests and the acceptance suite so each one executes once per session."""

from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from helpers import (  # noqa: E402
    TINY_FEN,
    TINY_ROT_HEAD,
    flashing_corpus,
    oriented_test_set,
    oriented_train_set,
    tiny_anomaly_spec,
)

torch.set_num_threads(1)


class Timed:
    def __init__(self, value, seconds):
        self.value = value
        self.seconds = seconds


@pytest.fixture(scope="session")
def stage1_run():
    """500 steps on the oriented-gradient corpus plus held-out accuracy."""
    from crowdlab.metrics import rotation_accuracy
    from crowdlab.nn_utils import OptimizerConfig
    from crowdlab.stage1 import predict_rotations, rotation_eval_set, train_stage1

    t0 = time.perf_counter()
    archive, trace, model = train_stage1(
        oriented_train_set(), TINY_FEN, TINY_ROT_HEAD, OptimizerConfig("adam", 1e-3, 16), seed=0, steps=500
    )
    crops, labels = rotation_eval_set(oriented_test_set(), 200, np.random.default_rng(5))
    acc = rotation_accuracy(predict_rotations(model, crops), labels)
    return Timed({"archive": archive, "trace": trace, "model": model, "heldout_acc": acc},
                 time.perf_counter() - t0)


@pytest.fixture(scope="session")
def anomaly_run():
    """Tiny classifier, 200 full-batch steps on the flashing/static corpus
    with a supplied (frozen) backbone."""
    from crowdlab.anomaly import AnomalyTrainConfig, build_anomaly_model, train_anomaly, vgg_archive

    spec = tiny_anomaly_spec()
    data = flashing_corpus()
    pretrained = vgg_archive(spec.vgg, 1)
    t0 = time.perf_counter()
    init_seed = int(np.random.SeedSequence(0).generate_state(3)[0])
    before = build_anomaly_model(spec, init_seed, pretrained)
    archive, trace, model = train_anomaly(
        data, AnomalyTrainConfig(lr=1e-3, epochs=200, batch_size=8), spec, seed=0, pretrained=pretrained
    )
    return Timed({"archive": archive, "trace": trace, "model": model, "before": before,
                  "data": data, "spec": spec, "pretrained": pretrained}, time.perf_counter() - t0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
