"""Prototype networks, prototypical relevance propagation and artifact cleansing on NumPy."""
from .artifacts import make_preset
from .evaluation import accuracy, ordering_experiment, pruning_matrix
from .model import PrototypeModel, TrainSchedule, build_model, forward, predict, train
from .mvclust import build_views, coreg_consensus_cluster, score_clustering, spectral_cluster
from .prp import prp_map, prp_maps, protopnet_heatmap, spray_lrp_map

__version__ = "0.1.0"

__all__ = [
    "PrototypeModel",
    "TrainSchedule",
    "accuracy",
    "build_model",
    "build_views",
    "coreg_consensus_cluster",
    "forward",
    "make_preset",
    "ordering_experiment",
    "predict",
    "protopnet_heatmap",
    "prp_map",
    "prp_maps",
    "pruning_matrix",
    "score_clustering",
    "spectral_cluster",
    "spray_lrp_map",
    "train",
]
