"""Shape-biased jigsaw self-supervision with tile-wise texture diversification."""

from .estimators import AdaINTransformer, ShapeJigsawClassifier, TileDiversifier

__version__ = "0.1.0"

__all__ = ["AdaINTransformer", "ShapeJigsawClassifier", "TileDiversifier", "__version__"]
