"""Temporal sound localization at desk scale.

Training, decoding and evaluation of an anchor-free multi-scale transformer
on fused audio-visual feature sequences, built on a small numpy autodiff
engine so that everything is checkable end to end on one CPU core.
"""

__version__ = "0.1.0"
