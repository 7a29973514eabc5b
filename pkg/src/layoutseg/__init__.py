"""Document layout segmentation toolkit.

Heavy submodules import numpy; keep this root import light so the CLI can
cap BLAS threads before anything numeric loads.
"""

__version__ = "0.1.0"
