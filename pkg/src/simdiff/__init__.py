"""Simulation-guided denoising diffusion at desk scale."""
