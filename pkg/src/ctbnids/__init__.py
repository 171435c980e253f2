"""Continuous-time Bayesian network models for network and host intrusion detection.

Submodules:

``ctmc``
    Homogeneous Markov processes: sampling, sufficient statistics, exact
    expected statistics under partial evidence, EM.
``ctbn``
    Networks of conditional intensity matrices, amalgamation, sampling and
    exact EM by flattening.
``nids``
    Port-level traffic model trained with a Rao-Blackwellised particle filter
    and scored over sliding windows.
``hids``
    System-call model with finite-resolution clock spikes, and the stide
    baseline.
``synth``, ``evaluation``, ``estimators``, ``cli``
    Data generation, ROC analysis, estimator wrappers and the command line.
"""
from .exceptions import (InputError, JointSizeError, NotConvergedWarning, NumericalError,
                         ParticleDegeneracyError, ZeroEvidenceError)

__version__ = "0.1.0"

__all__ = ["InputError", "JointSizeError", "NotConvergedWarning", "NumericalError",
           "ParticleDegeneracyError", "ZeroEvidenceError", "__version__"]
