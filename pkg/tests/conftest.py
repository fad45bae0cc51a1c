import pytest

from cplae.config import RunConfig


def _tiny_config(**train):
    """A run config small enough to train in well under a second."""
    doc = {
        "data": {"synth_classes": 15, "synth_per_class": 10, "synth_image_size": 8, "synth_channels": 1,
                 "synth_split_counts": [7, 4, 4], "ways": 3, "shots": 2, "queries": 3},
        "backbone": {"channels": [4, 4]},
        "cplae": {"negatives_per_class": 2},
        "optimizer": {"lr": 1e-3},
        "train": {"epochs": 2, "episodes_per_epoch": 3, "val_episodes": 2, **train},
        "eval": {"episodes": 4},
    }
    return RunConfig.from_dict(doc)


@pytest.fixture(scope="session")
def tiny_config():
    return _tiny_config


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record the PASS/FAIL line for one acceptance criterion.

    The line defaults to FAIL so a criterion that errors out still shows up
    in the summary.
    """
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})
    number = request.node.get_closest_marker("criterion").args[0]
    lines[number] = (False, "did not complete")

    def record(passed: bool, detail: str) -> bool:
        lines[number] = (bool(passed), detail)
        return passed

    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        passed, detail = lines[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
