"""Online detection of AI-generated images at desk scale.

Submodules: ``tensor`` (numpy autodiff engine), ``imaging``, ``augment``,
``corpus``, ``detector``, ``online_train``, ``inpaint``, ``metrics`` and ``cli``.
"""
from .detector import PixelDetector, WholeImageDetector
from .metrics import ScoreSet, auc, average_precision

__version__ = "0.1.0"

__all__ = ["PixelDetector", "WholeImageDetector", "ScoreSet", "auc", "average_precision"]
