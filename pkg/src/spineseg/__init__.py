"""Two-stage recurrent-residual segmentation network for spine radiographs.

Pure numpy + a small compiled kernel core. See README.md for the tour.
"""

__version__ = "0.1.0"
