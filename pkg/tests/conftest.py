import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spincluster import crystal
from spincluster.io import load_dataset
from spincluster.model import Structure

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def dataset():
    return load_dataset()


@pytest.fixture(scope="session")
def records(dataset):
    return {r.id: r for r in dataset.spins}


@pytest.fixture(scope="session")
def published(dataset):
    return dataset.structures["diamond"]


@pytest.fixture(scope="session")
def lattice_structure(published):
    """Published diamond coordinates moved onto exact lattice sites, first spin at the origin."""
    X = published.coordinates - published.coordinates[0]
    ints, _ = crystal.snap(X, 3.5668)
    return Structure(list(published.ids), crystal.to_lab(ints, 3.5668))


@pytest.fixture(scope="session")
def carbon_lattice_structure(lattice_structure):
    return lattice_structure.subset([s for s in lattice_structure.ids if s != "N"])


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
