import os
import warnings
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from synthscreen.structio import CifWarning, parse_cif

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", settings.get_profile("default"), max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def nd_cif_text() -> str:
    return (DATA / "Nd3BTeO9.cif").read_text()


@pytest.fixture(scope="session")
def nd_structure(nd_cif_text):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CifWarning)
        return parse_cif(nd_cif_text)
