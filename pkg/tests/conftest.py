import pytest

from acamera.synth import GenConfig, generate_dataset
from acamera.training import TrainConfig, load_training_set

ACCEPTANCE_LINES: list[str] = []

TINY_GEN = dict(count=12, seed=7, width=16, height=16)
TINY_INPUT = 8


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    generate_dataset(GenConfig(**TINY_GEN), out)
    return out


@pytest.fixture(scope="session")
def tiny_set(tiny_data_dir):
    return load_training_set(tiny_data_dir, TINY_INPUT)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(epochs=4, stage1_epochs=2, batch_size=4, input_size=TINY_INPUT, seed=1)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
