"""Experiment plumbing behind the command line: configs, synthetic tasks, runs, sweeps and verification."""
