"""Experiment orchestration and CLI."""
