"""Class-temporal relational network for densely-labelled action detection."""
from .cooccurrence import CooccurrenceModel
from .model import CTRN, CtrnConfig
from .estimator import CTRNDetector

__all__ = ["CTRN", "CtrnConfig", "CooccurrenceModel", "CTRNDetector"]
__version__ = "0.1.0"
