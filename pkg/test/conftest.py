import pytest

import utils

utils.use_repo_sources(True)

from mindcine.config import from_dict, validate  # noqa: E402
from mindcine.dataset import generate_synthetic  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size runs, only with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_cfg():
    return validate(from_dict(utils.tiny_dict()))


@pytest.fixture(scope="session")
def tiny_manifest():
    cfg = validate(from_dict(utils.tiny_dict()))
    return generate_synthetic(cfg.data, cfg.seed)
