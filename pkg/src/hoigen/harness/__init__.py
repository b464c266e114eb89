"""Synthetic dataset generation, run manifests, configuration, and the CLI."""
