"""Cross-view language modelling at desk scale.

Image-caption pairs and translation pairs are treated as two views of one
object and aligned by a shared cross-attention fusion model trained with
contrastive, matching and conditional masked-LM objectives.
"""

from .model import CclmConfig, CclmModel, count_parameters
from .data import CorpusSpec, build_corpus

__all__ = ["CclmConfig", "CclmModel", "CorpusSpec", "build_corpus", "count_parameters"]
__version__ = "0.1.0"
