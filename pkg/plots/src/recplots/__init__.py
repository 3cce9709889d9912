"""Plotting companion for the recommender pipeline's CSV artifacts.

Pure consumer: reads the metrics/sweep CSV schemas, never recomputes model
quantities beyond the redundant power-law fit used as a consistency check.
"""

__version__ = "0.1.0"
