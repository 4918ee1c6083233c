from pathlib import Path

import pytest
import torch

from mixedts.datasets import synthetic_entities
from mixedts.pipeline import RunConfig, prepare, train

ROOT = Path(__file__).resolve().parents[1]
TRAFFIC = ROOT / "data" / "traffic_hourly_2000.csv"

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def traffic_path():
    return TRAFFIC


@pytest.fixture(scope="session")
def tiny_config():
    return RunConfig(dataset=str(TRAFFIC), epochs_vae=3, epochs_diff=3, N=5, batch_size=16)


@pytest.fixture(scope="session")
def tiny_data(tiny_config):
    return prepare(tiny_config)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_config, tiny_data):
    return train(tiny_config, tiny_data)


@pytest.fixture(scope="session")
def entity_bundle():
    ds = synthetic_entities(n_entities=3, length=12)
    cfg = RunConfig(adapter="csv", epochs_vae=3, epochs_diff=3, N=5, conditional=True)
    data = prepare(cfg, dataset=ds)
    return train(cfg, data), data


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(LINES):
            terminalreporter.write_line(LINES[criterion])
