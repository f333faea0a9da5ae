"""Hierarchical similarity graphs over multi-level CNN features.

Per-level embedding differences form graph nodes, inter-level CAM
correlations form edges, and a gated top-down pass rectifies unreliable
upper-level nodes before they are summed into one dissimilarity.
"""
from .config import Config, load_config, parse_config
from .errors import ConfigError, ParseError, ShapeError, SimGraphError, TrainingError
from .features import FeatureMap, FeaturePyramid, ProjectionLayer
from .graph import EdgeStore, batch_edge_update
from .inference import InferenceParams, rectify, rectify_arrays
from .attribution import compute_sensitivities, rank_nodes
from .model import SimilarityModel, prepare
from .retrieval import evaluate, recall_at_k, sliced_similarity
from .training import TrainState, fit, objective_step

__version__ = "0.1.0"
