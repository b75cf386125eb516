"""Joint training of a dual-encoder retriever and a cross-encoder re-ranker.

Small numpy models with hand-written gradients, a synthetic topical corpus,
hybrid data augmentation and listwise distillation between the two scorers.
"""

from .errors import JointRankError, ParseError, TrainingError, UsageError, ValidationError

__version__ = "0.1.0"

__all__ = ["JointRankError", "ParseError", "TrainingError", "UsageError", "ValidationError", "__version__"]
