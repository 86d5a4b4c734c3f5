"""Trajectory-conditioned flow matching for video temporal consistency.

Library layout:

- ``autodiff``   minimal float64 tape autodiff, Adam, gradient checking
- ``hashgrid``   multi-resolution hash encoding with trainable tables
- ``trajectory`` per-frame motion trajectory maps and conditioning tokens
- ``flowmatch``  rectified-flow schedule, CFM loss, training and sampling
- ``reweight``   landmark-driven dynamic re-weighting of tokens
- ``metrics``    optical flow, temporal-consistency and expression metrics
- ``synthdata``  synthetic videos with ground-truth motion and landmarks
- ``dataio``     bundle/checkpoint/report file formats
- ``cli``        command-line pipeline (gen-synth, train, sample, eval, ...)
"""

__version__ = "0.1.0"
