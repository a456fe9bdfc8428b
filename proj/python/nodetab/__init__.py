"""Neural oblivious decision ensembles for tabular data.

Thin wrapper over the C++ core: differentiable oblivious decision trees with
sparse entmax feature selection and routing, trained end to end.
"""

from nodetab._core import (
    Model,
    entmax,
    gate,
    saturation_gap,
    softmax,
    sparsemax,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Model",
    "entmax",
    "gate",
    "saturation_gap",
    "softmax",
    "sparsemax",
    "train",
]
