"""Gaussian approximation potentials over localized Coulomb-matrix descriptors."""

from .data import Dataset, DataError, Molecule, parse_dataset, write_dataset
from .descriptors import DescriptorConfig, OccupancyError, compute_descriptor
from .modelfile import ModelFormatError, load_model, save_model
from .regression import (
    GapModel,
    KernelParams,
    NoiseModel,
    NumericalError,
    Prediction,
    negative_log_likelihood,
    predict,
    train,
)

__version__ = "0.1.0"
