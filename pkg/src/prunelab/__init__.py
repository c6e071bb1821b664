"""Magnitude- and data-driven pruning of small Transformer language models.

Submodules are imported on demand so that ``prunelab.cli`` can set thread
environment variables before numpy loads.
"""

__version__ = "0.1.0"
