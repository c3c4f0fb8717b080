"""Corpus synthesis, experiments and the command-line interface."""
