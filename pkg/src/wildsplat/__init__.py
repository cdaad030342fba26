"""Conflict-aware dual-view 2D Gaussian splatting."""
