"""CNRE: causal neuro-symbolic multi-behavior recommendation engine."""

from . import (  # noqa: F401
    cli,
    dataio,
    evalexplain,
    propagation,
    reasoning,
    retrieval,
    synthetic,
    tensorgrad,
    training,
)

__version__ = "0.1.0"
