"""Host GNNs for the fusion block: GCN and mean aggregation.

Parameters live in a flat ``{name: ndarray}`` dict (``gia.*``, ``conv{i}.w``,
``conv{i}.b``, ``head.w``, ``head.b``); :func:`model_forward` binds them to
Matrices, optionally watching them on a tape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import (ATTENTION_KINDS, DEFAULT_DN, PE_MODES, RESIDUAL_SOURCES,
                        GiaParams, gia_forward, glorot, init_gia_arrays)
from .core import Matrix, SparseOperator, Tape, add, matmul, relu, spmm
from .errors import ConfigError, ShapeError
from .graph import Graph

HOSTS = ("gcn", "mean-agg")

ModelParams = dict  # name -> ndarray


def _undirected_pairs(graph: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Unique off-diagonal (dst, src) pairs with both directions present."""
    e = graph.edges
    if len(e) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    both = np.concatenate([e, e[:, ::-1]])
    both = both[both[:, 0] != both[:, 1]]
    both = np.unique(both, axis=0)
    return both[:, 0], both[:, 1]


def normalize_adjacency(graph: Graph) -> SparseOperator:
    """Symmetric GCN operator ``D^-1/2 (A + I) D^-1/2`` as an edge list.

    Parallel and reversed duplicates collapse to one undirected edge; degrees
    count the self loop.
    """
    n = graph.n_nodes
    dst, src = _undirected_pairs(graph)
    deg = np.bincount(dst, minlength=n).astype(np.float64) + 1.0
    loops = np.arange(n)
    dst = np.concatenate([dst, loops])
    src = np.concatenate([src, loops])
    coef = 1.0 / np.sqrt(deg[dst] * deg[src])
    return SparseOperator(n, dst, src, coef)


def mean_adjacency(graph: Graph) -> SparseOperator:
    """Row-normalised ``D^-1 (A + I)``: each node averages itself and its neighbours."""
    n = graph.n_nodes
    dst, src = _undirected_pairs(graph)
    deg = np.bincount(dst, minlength=n).astype(np.float64) + 1.0
    loops = np.arange(n)
    dst = np.concatenate([dst, loops])
    src = np.concatenate([src, loops])
    return SparseOperator(n, dst, src, 1.0 / deg[dst])


def gcn_layer(a_hat: SparseOperator, h: Matrix, w: Matrix, bias: Optional[Matrix] = None,
              activation: str = "relu") -> Matrix:
    """``act(A_hat H W + b)`` with A_hat applied by gather-scatter."""
    if h.cols != w.rows:
        raise ShapeError(f"gcn_layer: features are {h.rows}x{h.cols}, weight is {w.rows}x{w.cols}")
    out = spmm(a_hat, matmul(h, w))
    if bias is not None:
        out = add(out, bias)
    if activation == "relu":
        return relu(out)
    if activation == "none":
        return out
    raise ConfigError(f"unknown activation {activation!r}")


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int
    n_classes: int = 2
    d_n: int = DEFAULT_DN
    hidden: int = DEFAULT_DN
    n_layers: int = 2
    host: str = "gcn"
    pe_mode: str = "gia"
    residual_source: str = "features"
    attention: str = "transpose"
    use_qkv: bool = True

    def __post_init__(self):
        if self.host not in HOSTS:
            raise ConfigError(f"unknown host {self.host!r}; expected one of {HOSTS}")
        if self.pe_mode not in PE_MODES:
            raise ConfigError(f"unknown pe_mode {self.pe_mode!r}; expected one of {PE_MODES}")
        if self.residual_source not in RESIDUAL_SOURCES:
            raise ConfigError(f"unknown residual_source {self.residual_source!r}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention {self.attention!r}")
        if min(self.in_dim, self.d_n, self.hidden, self.n_layers) < 1 or self.n_classes < 2:
            raise ConfigError("dimensions and layer count must be positive, n_classes >= 2")
        if self.pe_mode == "sinusoidal" and self.d_n % 4:
            raise ConfigError(f"sinusoidal encoding needs d_n divisible by 4, got {self.d_n}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.d_n] + [self.hidden] * self.n_layers
        return list(zip(dims[:-1], dims[1:]))

    def operator(self, graph: Graph) -> SparseOperator:
        return normalize_adjacency(graph) if self.host == "gcn" else mean_adjacency(graph)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    params = init_gia_arrays(rng, config.in_dim, config.d_n)
    for i, (d_in, d_out) in enumerate(config.layer_dims()):
        params[f"conv{i}.w"] = glorot(rng, d_in, d_out)
        params[f"conv{i}.b"] = np.zeros((1, d_out))
    params["head.w"] = glorot(rng, config.hidden, config.n_classes)
    params["head.b"] = np.zeros((1, config.n_classes))
    return params


def param_shapes(config: ModelConfig) -> dict:
    d = config.d_n
    shapes = {"gia.w_embed": (config.in_dim, d), "gia.w_pos": (2, d)}
    for name in ("w_q", "w_k", "w_v", "w_res"):
        shapes[f"gia.{name}"] = (d, d)
    for name in ("b_embed", "b_pos", "b_res"):
        shapes[f"gia.{name}"] = (1, d)
    for i, (d_in, d_out) in enumerate(config.layer_dims()):
        shapes[f"conv{i}.w"] = (d_in, d_out)
        shapes[f"conv{i}.b"] = (1, d_out)
    shapes["head.w"] = (config.hidden, config.n_classes)
    shapes["head.b"] = (1, config.n_classes)
    return shapes


def check_params(params: ModelParams, config: ModelConfig) -> None:
    expected = param_shapes(config)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ConfigError(f"parameters missing for this config: {missing}")
    for name, shape in expected.items():
        if np.shape(params[name]) != shape:
            raise ShapeError(f"parameter {name} has shape {np.shape(params[name])}, config needs {shape}")


def model_forward(graph: Graph, params: ModelParams, config: ModelConfig,
                  tape: Optional[Tape] = None, a_hat: Optional[SparseOperator] = None) -> Matrix:
    """Logits (N x n_classes): fusion block, conv stack with ReLU, linear head."""
    if graph.node_features.shape[1] != config.in_dim:
        raise ShapeError(f"graph has {graph.node_features.shape[1]} node features, config expects {config.in_dim}")
    check_params(params, config)

    def bind(name):
        return tape.watch(name, params[name]) if tape is not None else Matrix(params[name], copy=False)

    gia = GiaParams.from_arrays(params, tape=tape, pe_mode=config.pe_mode, use_qkv=config.use_qkv,
                                residual_source=config.residual_source, attention=config.attention)
    if a_hat is None:
        a_hat = config.operator(graph)
    h = gia_forward(Matrix(graph.node_features, copy=False), Matrix(graph.positions, copy=False), gia)
    for i in range(config.n_layers):
        h = gcn_layer(a_hat, h, bind(f"conv{i}.w"), bind(f"conv{i}.b"), "relu")
    return add(matmul(h, bind("head.w")), bind("head.b"))
