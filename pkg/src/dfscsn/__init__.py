"""Dynamic flexible-subclass closed skew-normal (D-FS-CSN) spatio-temporal models."""

from .gibbs import ChainConfig, PosteriorDraws, Priors, effective_sample_size, run_chain, run_chains
from .model import DCAR, DFSCSN, LatentState, ModelParams, PanelData, simulate
from .spatial import AdjacencyGraph, build_grid_graph, eigendecompose_laplacian, make_spatial_operator

__all__ = [
    "AdjacencyGraph", "ChainConfig", "DCAR", "DFSCSN", "LatentState", "ModelParams", "PanelData",
    "PosteriorDraws", "Priors", "build_grid_graph", "eigendecompose_laplacian", "effective_sample_size",
    "make_spatial_operator", "run_chain", "run_chains", "simulate",
]

__version__ = "0.1.0"
