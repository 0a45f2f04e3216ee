import pytest

from cdmjscc import numerics as nm


@pytest.fixture(autouse=True)
def _reset_precision():
    nm.set_precision(32)
    yield
    nm.set_precision(32)
