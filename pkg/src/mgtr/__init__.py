"""One-stage mutual gaze detection with a set-prediction transformer."""
from .config import RunConfig, toy_config
from .data import AnnotationRecord, AugmentationConfig, SyntheticSceneSpec
from .evaluation import EvalReport, ScoredDetection, evaluate
from .geometry import BoundingBox, CornerBox
from .instances import GroundTruthSet, MutualGazeInstance, PredictedInstance, PredictionSet
from .losses import LossWeights, SetCriterion
from .matcher import MatchAssignment, MatchWeights
from .model import MGTR, ModelConfig

__version__ = "0.1.0"
