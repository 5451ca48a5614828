"""Severed dynamics and thermodynamics of anharmonic lattice systems."""

from . import dynamics, ensembles, lab, model, thermo
from .dynamics import Configuration, IntegratorSchedule, evolve, locality_experiment
from .ensembles import Ensemble, GaussianBlock, GibbsFiniteVolume, ProductGaussian, sample
from .model import LatticeModel, box_sites, load_model, reference_model, validate_assumptions
from .thermo import entropy_knn, gibbs_identity_check, pressure, pressure_curve

__version__ = "0.1.0"

__all__ = [
    "dynamics", "ensembles", "lab", "model", "thermo",
    "Configuration", "IntegratorSchedule", "evolve", "locality_experiment",
    "Ensemble", "GaussianBlock", "GibbsFiniteVolume", "ProductGaussian", "sample",
    "LatticeModel", "box_sites", "load_model", "reference_model", "validate_assumptions",
    "entropy_knn", "gibbs_identity_check", "pressure", "pressure_curve",
]
