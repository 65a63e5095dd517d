"""featpipe: a trainable local-feature pipeline.

Detector, orientation estimator and descriptor networks built on a small
tape-based differentiable numerics core, plus synthetic data generation,
staged training and an evaluation bench.
"""

__version__ = "0.1.0"

from .grad import Tensor, ParamStore, NumericsError, ShapeError  # noqa: F401
