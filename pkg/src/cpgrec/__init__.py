"""Category- and popularity-aware graph recommender for video games."""
from ._accel import backend_name, set_threads
from .data import (
    DataError,
    GameCatalog,
    InteractionLog,
    SplitLog,
    SynthConfig,
    apply_user_5core,
    generate_synthetic,
    load_catalog,
    load_interactions,
    split_interactions,
)
from .graphs import SparseGraph, ThetaConfig, build_bipartite, popularity_sets
from .model import ModelParams, build_model_graphs, load_checkpoint, save_checkpoint
from .propagation import FusionWeights
from .training import Hyperparams, train

__version__ = "0.1.0"
