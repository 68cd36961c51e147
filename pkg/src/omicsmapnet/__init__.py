"""Expression profiles rendered as treemap images and classified by a small CNN."""

from .errors import OmicsMapError
from .estimators import L2LogisticRegressionCV, OmicsMapNetClassifier, TreemapImager
from .hierarchy import GeneLeaf, HierarchyNode, HierarchyTree
from .expr import CountMatrix, ExpressionMatrix
from .treemap import LayoutEntry, Rect, TreemapLayout
from .cnn import CnnModel, TrainConfig

__all__ = [
    "CnnModel", "CountMatrix", "ExpressionMatrix", "GeneLeaf", "HierarchyNode", "HierarchyTree",
    "L2LogisticRegressionCV", "LayoutEntry", "OmicsMapError", "OmicsMapNetClassifier", "Rect",
    "TrainConfig", "TreemapImager", "TreemapLayout",
]
__version__ = "0.1.0"
