"""Latent linear quadratic regulator lab."""
