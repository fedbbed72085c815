"""Experiment drivers, statistics helpers, configuration and the CLI."""
