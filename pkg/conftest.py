"""Pytest wiring: keep doctest reprs stable across numpy 1.x and 2.x."""

import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _numpy_legacy_repr_for_doctests(request: pytest.FixtureRequest) -> None:
    if not isinstance(request.node, pytest.DoctestItem):
        yield
        return
    saved = np.get_printoptions()
    if int(np.__version__.split(".")[0]) >= 2:
        np.set_printoptions(legacy="1.25")
    yield
    np.set_printoptions(**saved)
