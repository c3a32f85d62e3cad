"""Crystal-structure toolkit: file I/O, periodic graphs, an equivariant graph
network with multitask heads, prior-informed diffusion generation, hull
stability, superconductor screening formulas, and evaluation metrics."""

from . import (autodiff, cli, diffusion, eqcore, geometry, harmonics, metrics,
               pipeline, structio, superprop, thermo)

__version__ = "0.1.0"

__all__ = [
    "autodiff", "cli", "diffusion", "eqcore", "geometry", "harmonics",
    "metrics", "pipeline", "structio", "superprop", "thermo", "__version__",
]
