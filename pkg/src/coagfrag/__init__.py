"""Exact stochastic simulation of binary coagulation-fragmentation dynamics
with homogeneous rates, plus the verification toolkit built around it:
correlation-measure estimation, reversibility and hierarchy checks, and a
sectional mean-field solver for the limiting kinetic equation.
"""

from coagfrag.kernels import (
    HomogeneousKernel,
    KernelError,
    KernelPair,
    kernel_constants,
    make_kernel_pair,
)
from coagfrag.state import ClusterState, PointConfiguration
from coagfrag.samplers import (
    LiftingLaw,
    RngStream,
    sample_gamma_pp,
    sample_lifted,
    sample_pd,
    sample_poisson_init,
    sample_tilted_pd,
)
from coagfrag.dynamics import GeneratorForm, GeneratorSpec, Trajectory, simulate

__all__ = [
    "ClusterState",
    "GeneratorForm",
    "GeneratorSpec",
    "HomogeneousKernel",
    "KernelError",
    "KernelPair",
    "LiftingLaw",
    "PointConfiguration",
    "RngStream",
    "Trajectory",
    "kernel_constants",
    "make_kernel_pair",
    "sample_gamma_pp",
    "sample_lifted",
    "sample_pd",
    "sample_poisson_init",
    "sample_tilted_pd",
    "simulate",
]

__version__ = "0.1.0"
