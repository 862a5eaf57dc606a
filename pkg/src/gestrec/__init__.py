"""Long-range dynamic gesture recognition toolkit.

A from-scratch pipeline for classifying dynamic gestures at distances of
4-20 m: synthetic distance-parameterized clip generation, keyframe
reduction, a two-pathway (slow/fast) convolutional front-end with a
transformer head, and training with a distance-weighted cross-entropy
(LongLoss). Built on numpy with reverse-mode autodiff; hot kernels are
numba-compiled with a pure-numpy fallback (set GESTREC_NUMBA=0).
"""

__version__ = "0.1.0"
