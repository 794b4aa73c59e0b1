"""Mode-aware sequential change detection for streams of prediction error."""

from .detectors import DetectorConfig, GlobalCusum, ModeAwareCusum
from .dynamics import ModeSequenceSpec, generate
from .mixture import GaussianComponent, MixtureModel, Transform, fit_em

__version__ = "0.1.0"

__all__ = [
    "DetectorConfig",
    "GaussianComponent",
    "GlobalCusum",
    "MixtureModel",
    "ModeAwareCusum",
    "ModeSequenceSpec",
    "Transform",
    "fit_em",
    "generate",
    "__version__",
]
