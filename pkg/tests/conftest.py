import pytest

from p4net.config import ExperimentConfig, validate


def tiny_config(**changes) -> ExperimentConfig:
    """A few-second synthetic experiment: 5 training clients, 2 clusters."""
    base = dict(dataset="synthetic", num_classes=4, image_size=8, separation=10.0, clusters=2,
                clients=6, samples_per_client=20, iid_fraction=1.0, rounds=6, eval_interval=3,
                probe_peers=3, group_size_max=3, eval_fraction=0.2)
    base.update(changes)
    return validate(ExperimentConfig(**base))


@pytest.fixture
def tiny():
    return tiny_config


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
