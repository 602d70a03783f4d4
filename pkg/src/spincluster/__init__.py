"""Reconstruction of nuclear-spin cluster structures from pairwise dipolar couplings."""

from .constants import DEFAULT, PhysicalConstants
from .model import (CouplingEntry, CouplingTable, Projection, SpinRecord, Structure, coupling_frequencies,
                    dipolar_coupling, dipolar_tensor, expected_spin_count, hyperfine_from_frequencies,
                    residuals_and_xi)
from .io import Dataset, RunConfig, load_coupling_table, load_dataset

__all__ = [
    "DEFAULT", "PhysicalConstants", "CouplingEntry", "CouplingTable", "Projection", "SpinRecord", "Structure",
    "coupling_frequencies", "dipolar_coupling", "dipolar_tensor", "expected_spin_count",
    "hyperfine_from_frequencies", "residuals_and_xi", "Dataset", "RunConfig", "load_coupling_table",
    "load_dataset",
]
__version__ = "0.1.0"
