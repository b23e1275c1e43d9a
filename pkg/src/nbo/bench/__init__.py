"""Synthetic data, startup pipeline and load generation."""
