"""Learned prompt contexts for open-vocabulary region classification.

A shared context is prepended to fixed class tokens and passed through a
frozen text encoder; the resulting class embeddings classify region
embeddings by tempered cosine softmax. Contexts are fitted per IoU band of
the positive proposals and averaged into one.
"""

from .errors import CheckpointError, ConfigError, DataError

__all__ = ["CheckpointError", "ConfigError", "DataError"]
__version__ = "0.1.0"
