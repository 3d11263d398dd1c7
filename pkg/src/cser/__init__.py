"""Distributed SGD with compressed partial synchronization and error reset."""

from .compressors import CompressorSpec, Kind, compress, grbs, randomk, residual, topk
from .optimizers import OptimizerConfig, Schedule, Variant, iterate, mean_model, trajectory
from .problems import HeterogeneousQuadratic, SyntheticLogistic, TinyMLP, make_problem
from .syncfabric import Fabric, FabricConfig

__version__ = "0.1.0"
