"""Geographic information alignment: fusing node embeddings with positions.

Two attention layouts are provided for the fusion step:

* :func:`conventional_cross_attention` attends node-to-node and materialises
  an N x N score matrix.
* :func:`transpose_cross_attention` attends feature-to-feature. Its score
  matrix is ``softmax(Q^T K / sqrt(N))``, only D_n x D_n, so time and memory
  are linear in N.

:func:`gia_forward` wraps either one in the residual block that is plugged in
front of a host GNN, and also implements the simpler positional-encoding
variants used for ablations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Matrix, Tape, add, matmul, softmax_rows, transpose
from .errors import ConfigError, ShapeError

PE_MODES = ("none", "linear", "sinusoidal", "gia")
RESIDUAL_SOURCES = ("features", "features_plus_positions")
ATTENTION_KINDS = ("transpose", "conventional")
DEFAULT_DN = 16


@dataclass
class GiaParams:
    """Learnable tensors of the fusion block plus its mode switches.

    ``w_embed``/``b_embed`` belong to the host's input embedding; the block
    only reads them.
    """

    w_embed: Matrix              # D1 x Dn
    b_embed: Matrix              # 1 x Dn
    w_pos: Matrix                # 2 x Dn
    b_pos: Matrix                # 1 x Dn
    w_q: Matrix                  # Dn x Dn
    w_k: Matrix
    w_v: Matrix
    w_res: Matrix
    b_res: Matrix                # 1 x Dn
    pe_mode: str = "gia"
    use_qkv: bool = True
    residual_source: str = "features"
    attention: str = "transpose"

    TENSORS = ("w_embed", "b_embed", "w_pos", "b_pos", "w_q", "w_k", "w_v", "w_res", "b_res")

    def __post_init__(self):
        if self.pe_mode not in PE_MODES:
            raise ConfigError(f"unknown pe_mode {self.pe_mode!r}; expected one of {PE_MODES}")
        if self.residual_source not in RESIDUAL_SOURCES:
            raise ConfigError(f"unknown residual_source {self.residual_source!r}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention {self.attention!r}")
        dn = self.w_pos.cols
        if dn < 1:
            raise ShapeError("latent size must be at least 1")
        if self.w_pos.rows != 2:
            raise ShapeError(f"w_pos must be 2 x {dn}, got {self.w_pos.shape}")
        if self.w_embed.cols != dn:
            raise ShapeError(f"w_embed must have {dn} columns, got {self.w_embed.shape}")
        for name in ("w_q", "w_k", "w_v", "w_res"):
            if getattr(self, name).shape != (dn, dn):
                raise ShapeError(f"{name} must be {dn} x {dn}, got {getattr(self, name).shape}")
        for name in ("b_embed", "b_pos", "b_res"):
            if getattr(self, name).shape != (1, dn):
                raise ShapeError(f"{name} must be 1 x {dn}, got {getattr(self, name).shape}")

    @property
    def d_n(self) -> int:
        return self.w_pos.cols

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str = "gia.", tape: Optional[Tape] = None, **modes):
        """Bind ``{prefix + name: ndarray}`` arrays, watching them on ``tape`` if given."""
        def bind(name):
            key = prefix + name
            return tape.watch(key, arrays[key]) if tape is not None else Matrix(arrays[key], copy=False)
        return cls(**{name: bind(name) for name in cls.TENSORS}, **modes)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_gia_arrays(rng: np.random.Generator, in_dim: int, d_n: int = DEFAULT_DN, prefix: str = "gia.") -> dict:
    """Glorot-uniform weights and zero biases for every :class:`GiaParams` tensor."""
    out = {
        "w_embed": glorot(rng, in_dim, d_n),
        "b_embed": np.zeros((1, d_n)),
        "w_pos": glorot(rng, 2, d_n),
        "b_pos": np.zeros((1, d_n)),
        "w_q": glorot(rng, d_n, d_n),
        "w_k": glorot(rng, d_n, d_n),
        "w_v": glorot(rng, d_n, d_n),
        "w_res": glorot(rng, d_n, d_n),
        "b_res": np.zeros((1, d_n)),
    }
    return {prefix + k: v for k, v in out.items()}


def _qkv(x_hat: Matrix, p_hat: Matrix, params: GiaParams):
    if x_hat.shape != p_hat.shape:
        raise ShapeError(f"x_hat {x_hat.shape} and p_hat {p_hat.shape} must have the same shape")
    if x_hat.cols != params.d_n:
        raise ShapeError(f"inputs have {x_hat.cols} columns, parameters expect {params.d_n}")
    if not params.use_qkv:
        return x_hat, p_hat, p_hat
    return matmul(x_hat, params.w_q), matmul(p_hat, params.w_k), matmul(p_hat, params.w_v)


def conventional_cross_attention(x_hat: Matrix, p_hat: Matrix, params: GiaParams) -> Matrix:
    """Node-wise attention ``softmax(Q K^T / sqrt(Dn)) V``; builds an N x N matrix."""
    q, k, v = _qkv(x_hat, p_hat, params)
    weights = softmax_rows(matmul(q, transpose(k)), math.sqrt(params.d_n))
    return matmul(weights, v)


def transpose_cross_attention(x_hat: Matrix, p_hat: Matrix, params: GiaParams) -> Matrix:
    """Feature-wise attention returned in node-major layout.

    With ``S = softmax(Q^T K / sqrt(N))`` (Dn x Dn) the aligned features are
    ``S V^T``; this returns their transpose ``V S^T`` (N x Dn).
    """
    if x_hat.rows < 1:
        raise ShapeError("need at least one node")
    q, k, v = _qkv(x_hat, p_hat, params)
    scores = softmax_rows(matmul(transpose(q), k), math.sqrt(x_hat.rows))
    return matmul(v, transpose(scores))


def feature_scores(x_hat: Matrix, p_hat: Matrix, params: GiaParams) -> Matrix:
    """The Dn x Dn attention matrix used by :func:`transpose_cross_attention`."""
    q, k, _ = _qkv(x_hat, p_hat, params)
    return softmax_rows(matmul(transpose(q), k), math.sqrt(x_hat.rows))


def sinusoidal_encode(p: Matrix, d_n: int) -> Matrix:
    """Fixed sin/cos encoding of 2-D positions.

    Each coordinate is min-max scaled to [0, 2*pi] over the graph, then gets
    ``d_n // 4`` bands with frequency ``10000 ** (-4 i / d_n)``. Column layout
    per coordinate: the sin bands, then the cos bands.
    """
    if d_n % 4 != 0 or d_n < 4:
        raise ConfigError(f"sinusoidal encoding needs d_n divisible by 4, got {d_n}")
    pos = p.data if isinstance(p, Matrix) else np.asarray(p, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ShapeError(f"positions must be N x 2, got {pos.shape}")
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    scaled = (pos - lo) / span * (2 * math.pi)
    freqs = 10000.0 ** (-4.0 * np.arange(d_n // 4) / d_n)
    blocks = []
    for c in range(2):
        phase = scaled[:, c:c + 1] * freqs
        blocks += [np.sin(phase), np.cos(phase)]
    return Matrix(np.hstack(blocks), copy=False)


def gia_forward(x: Matrix, p: Matrix, params: GiaParams) -> Matrix:
    """Embed node features and fuse in position information per ``pe_mode``.

    none       -> x_hat
    linear     -> x_hat + p_hat
    sinusoidal -> x_hat + sinusoidal_encode(p)
    gia        -> residual(x_hat) + attention(x_hat, p_hat)
    """
    if p.cols != 2:
        raise ShapeError(f"positions must have 2 columns, got {p.cols}")
    if x.rows != p.rows:
        raise ShapeError(f"{x.rows} feature rows but {p.rows} position rows")
    x_hat = add(matmul(x, params.w_embed), params.b_embed)
    mode = params.pe_mode
    if mode == "none":
        return x_hat
    if mode == "sinusoidal":
        return add(x_hat, sinusoidal_encode(p, params.d_n))
    p_hat = add(matmul(p, params.w_pos), params.b_pos)
    if mode == "linear":
        return add(x_hat, p_hat)
    source = x_hat if params.residual_source == "features" else add(x_hat, p_hat)
    residual = add(matmul(source, params.w_res), params.b_res)
    if params.attention == "transpose":
        fused = transpose_cross_attention(x_hat, p_hat, params)
    else:
        fused = conventional_cross_attention(x_hat, p_hat, params)
    return add(residual, fused)


def rank_of_scores(x_hat, p_hat) -> int:
    """Numerical rank of ``x_hat^T p_hat``.

    Singular values below ``sigma_max * max(N, Dn) * 1e-12`` count as zero.
    """
    xa = x_hat.data if isinstance(x_hat, Matrix) else np.asarray(x_hat, dtype=np.float64)
    pa = p_hat.data if isinstance(p_hat, Matrix) else np.asarray(p_hat, dtype=np.float64)
    s = np.linalg.svd(xa.T @ pa, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    tol = s[0] * max(xa.shape) * 1e-12
    return int(np.sum(s > tol))

