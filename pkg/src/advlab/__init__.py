"""Desk-scale adversarial robustness lab.

Submodules: ``tensor`` (autodiff core), ``models``, ``attacks``, ``training``,
``distill``, ``analysis``, ``datasets``, ``config``, ``pipeline``, ``cli`` and
the scikit-learn style wrappers in ``estimator``.
"""

from .attacks import AttackSpec, run_attack
from .estimator import DeskClassifier, RobustFeatureDistiller

__version__ = "0.1.0"

__all__ = ["AttackSpec", "run_attack", "DeskClassifier", "RobustFeatureDistiller", "__version__"]
