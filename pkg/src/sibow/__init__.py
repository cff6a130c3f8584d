"""SIFT bag-of-features encoding with weighted-SVM class probability estimation."""

__version__ = "0.1.0"
