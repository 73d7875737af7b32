import pytest

from src.utils import configure_logging


@pytest.fixture(autouse=True, scope="session")
def _logging():
    configure_logging("warn")
