"""Kernel-machine interaction testing with cross-validated kernel ensembles."""

from .ensemble import EnsembleConfig, EnsembleFit, cvek
from .interaction import InteractionTest, TestConfig, test_interaction
from .kernels import KernelMatrix, KernelSpec, kernel_matrix
from .ridge import KrrFit, NullModelFit, fit_krr, reml_fit, tune_lambda
from .simulate import SimulationScenario, generate_dataset, run_scenario

__version__ = "0.1.0"

__all__ = [
    "EnsembleConfig",
    "EnsembleFit",
    "cvek",
    "InteractionTest",
    "TestConfig",
    "test_interaction",
    "KernelMatrix",
    "KernelSpec",
    "kernel_matrix",
    "KrrFit",
    "NullModelFit",
    "fit_krr",
    "reml_fit",
    "tune_lambda",
    "SimulationScenario",
    "generate_dataset",
    "run_scenario",
    "__version__",
]
