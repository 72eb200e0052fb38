import pytest

from rfpsac.tensor import active_tape


@pytest.fixture(autouse=True)
def _clean_tape():
    active_tape().clear()
    yield
    active_tape().clear()
