"""Geographic information alignment for graph neural networks.

Node features and 2-D positions are fused by a residual block whose attention
runs across feature dimensions (a d x d score matrix) instead of across nodes,
so the cost grows linearly with the number of nodes.
"""
from .attention import (GiaParams, conventional_cross_attention, gia_forward, rank_of_scores,
                        sinusoidal_encode, transpose_cross_attention)
from .core import AllocationTracker, Matrix, SparseOperator, Tape, backward
from .graph import Graph, SplitMasks, load_graph, make_graph, minmax_normalize, save_graph, stratified_split
from .layers import ModelConfig, init_params, model_forward, normalize_adjacency
from .synthgen import SynthConfig, generate
from .training import TrainConfig, TrainReport, f1_score, roc_auc, train

__version__ = "0.1.0"
