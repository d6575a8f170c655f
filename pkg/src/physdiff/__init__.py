"""Physics-inspired latent diffusion forecasting of tropical-cyclone tracks.

The package couples a denoising diffusion model over a learned latent
sequence with a conditional Transformer whose decoder blocks carry a gated
cross-task attention module splitting features into trajectory, wind and
pressure streams.  All numerics are plain numpy with hand-derived backward
passes; see README.md for the command-line surface and the demo scripts.
"""

__version__ = "0.1.0"
