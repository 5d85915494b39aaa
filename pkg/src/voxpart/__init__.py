"""Part-aware 3D shape generation: voxel fields, latent diffusion, CLI."""

__version__ = "0.1.0"
