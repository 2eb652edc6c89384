"""Parallel-in-time GRU training with multigrid-reduction-in-time."""

__version__ = "0.1.0"
