import pytest

from protofed.config import RunConfig

# One line per acceptance criterion, filled in by tests/test_acceptance.py.
ACCEPTANCE: dict[int, str] = {}


def tiny_dict(**top) -> dict:
    """A seconds-scale configuration: 3 classes, 2 rounds, small networks."""
    obj = {
        "dataset": {"classes": 3, "n_per_class": 30, "dim": 6, "separation": 6.0},
        "encoder": {"hidden_dims": [8], "output_dim": 4, "groups": 2},
        "federation": {"rounds": 2, "batch_size": 32, "lr": 0.2},
        "flow": {"layers": 2, "hidden": [8], "epochs": 2},
        "mediator": {"pool_size": 32, "teacher_hidden": [16]},
    }
    obj.update(top)
    return obj


@pytest.fixture
def tiny_config() -> RunConfig:
    return RunConfig.from_dict(tiny_dict())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
