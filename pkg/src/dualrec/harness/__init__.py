"""Experiment harness: configuration, runs, reports and the command line."""
