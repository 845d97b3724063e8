import pytest

from app.core.config import get_settings
from app.services.fem import HighFidelitySolver, assemble, build_mesh
from app.services.params import build_checkerboard_model


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _isolated_settings(monkeypatch, tmp_path):
    """Settings come from the test's environment only, never from a developer .env."""
    monkeypatch.chdir(tmp_path)
    for key in ("LOG_LEVEL", "WORKERS", "BASIS_PATH", "VALIDATION_CACHE_MB", "MAX_BASIS_SIZE", "MAX_TRAINING_SIZE"):
        monkeypatch.delenv(f"RBGREEDY_{key}", raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture(scope="session")
def small_model():
    """d = 4 checkerboard with a_j = j^-2."""
    return build_checkerboard_model(2, 2.0, 0.1)


@pytest.fixture(scope="session")
def small_mesh():
    return build_mesh(8, 2)


@pytest.fixture(scope="session")
def small_operator(small_model, small_mesh):
    return assemble(small_mesh, small_model)


@pytest.fixture
def small_solver(small_operator):
    return HighFidelitySolver(small_operator)
