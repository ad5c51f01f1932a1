"""Temporal-difference convolution toolkit.

Spatio-temporal convolution blocks whose temporal taps are constrained to
compute frame differences, a three-branch re-parameterizable aggregation
module, windowed spatio-temporal attention, and a small moving-target
detector built from them, plus a synthetic benchmark and detection metrics.
"""

__version__ = "0.1.0"
