"""Laplacian spectral volumes for continuously heterogeneous tomography."""
