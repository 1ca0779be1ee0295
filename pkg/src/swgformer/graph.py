"""Sliding-window graph (SwG) module.

A T x F x C feature map is cut along time into windows of ``t`` frames. Each
window is a graph over n = F*C vertices (vertex id ``f*C + c``) whose feature
vector is the t-frame trajectory of that frequency-channel cell. Neighbours are
found by KNN on the current features, aggregated, and the vertex is updated by
an MLP followed by a residual two-layer transform.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numerics import functional as F
from .numerics.nn import BatchNorm, Linear, Module
from .numerics.tensor import Parameter, Tensor, concat

AGGREGATORS = ("conv2d_agg", "max_relative", "sage_mean", "gin_sum")


@dataclass
class GraphChunk:
    vertex_features: np.ndarray  # n x t
    chunk_index: int
    n_freq: int
    n_chan: int

    @property
    def n(self) -> int:
        return self.vertex_features.shape[0]

    @property
    def t(self) -> int:
        return self.vertex_features.shape[1]


@dataclass
class NeighborIndex:
    indices: np.ndarray  # n x k, ascending distance then ascending id
    distances: np.ndarray  # n x k squared Euclidean distances

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def check_window(T: int, t: int) -> int:
    if t < 1 or T % t:
        raise ValueError(f"window size t={t} does not divide the frame count T={T}")
    return T // t


def chunk_time(x: np.ndarray, t: int) -> list[GraphChunk]:
    """Split a T x F x C array into T/t graphs of n = F*C vertices with t features each."""
    T, n_freq, n_chan = x.shape
    n_chunks = check_window(T, t)
    chunks = []
    for j in range(n_chunks):
        block = x[j * t:(j + 1) * t].reshape(t, n_freq * n_chan)
        chunks.append(GraphChunk(np.ascontiguousarray(block.T), j, n_freq, n_chan))
    return chunks


def unchunk(chunks: list[GraphChunk]) -> np.ndarray:
    chunks = sorted(chunks, key=lambda c: c.chunk_index)
    return np.concatenate(
        [c.vertex_features.T.reshape(c.t, c.n_freq, c.n_chan) for c in chunks], axis=0)


# ---------------------------------------------------------------------------
# KNN


def pairwise_sq_distances(h: np.ndarray) -> np.ndarray:
    """[..., n, t] -> [..., n, n] squared Euclidean distances accumulated in float64."""
    h = np.asarray(h, dtype=np.float64)
    return ((h[..., :, None, :] - h[..., None, :, :]) ** 2).sum(axis=-1)


def knn_indices(h: np.ndarray, k: int, return_distances: bool = False):
    """Batched neighbour lists for vertex features ``h`` of shape [..., n, t].

    Self is excluded; rows are ordered by ascending distance with ties broken
    by ascending vertex id (stable sort over ids).
    """
    *lead, n, t = h.shape
    if not 1 <= k < n:
        raise ValueError(f"k={k} neighbours requires 1 <= k < n={n}")
    h2 = np.asarray(h).reshape(-1, n, t)
    M = h2.shape[0]
    idx = np.empty((M, n, k), dtype=np.int64)
    dist = np.empty((M, n, k), dtype=np.float64) if return_distances else None
    # bound the [m, n, n, t] difference tensor to roughly 32 MB
    step = max(1, int(4e6 // max(1, n * n * t)))
    diag = np.arange(n)
    for s in range(0, M, step):
        d = pairwise_sq_distances(h2[s:s + step])
        d[:, diag, diag] = np.inf
        order = np.argsort(d, axis=-1, kind="stable")[..., :k]
        idx[s:s + step] = order
        if return_distances:
            dist[s:s + step] = np.take_along_axis(d, order, axis=-1)
    idx = idx.reshape(*lead, n, k)
    if return_distances:
        return idx, dist.reshape(*lead, n, k)
    return idx


def knn_graph(chunk: GraphChunk | np.ndarray, k: int) -> NeighborIndex:
    h = chunk.vertex_features if isinstance(chunk, GraphChunk) else np.asarray(chunk)
    idx, dist = knn_indices(h, k, return_distances=True)
    return NeighborIndex(idx, dist)


def dump_neighbors_csv(path, nbrs: NeighborIndex) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex_id", "rank", "neighbor_id", "distance"])
        for i in range(nbrs.indices.shape[0]):
            for r in range(nbrs.k):
                w.writerow([i, r, int(nbrs.indices[i, r]), repr(float(nbrs.distances[i, r]))])


# ---------------------------------------------------------------------------
# aggregation


def _as_nbr_array(nbrs) -> np.ndarray:
    return nbrs.indices if isinstance(nbrs, NeighborIndex) else np.asarray(nbrs)


def conv2d_agg(h: Tensor, nbrs, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Rank-positional aggregation: g_i = sum_j w_j * h_{N_j(i)} + b.

    h is [..., n, t]; ``weight`` holds k values (any shape with k entries, e.g.
    the 1 x 1 x 1 x k conv kernel). The gathered [..., n, k, t] block is laid
    out as a one-channel image with rows = vertices, columns = neighbour rank
    and swept by a 1 x k kernel, so one weight per rank is shared by every
    vertex and every time step.
    """
    idx = _as_nbr_array(nbrs)
    *lead, n, t = h.shape
    k = idx.shape[-1]
    if weight.size != k:
        raise ValueError(f"conv2d_agg: {weight.size} weights for k={k} neighbours")
    g = F.gather_neighbors(h, idx)  # [..., n, k, t]
    M = int(np.prod(lead)) if lead else 1
    img = g.reshape(M, n, k, t).transpose(0, 3, 1, 2).reshape(M * t, 1, n, k)
    kernel = weight.reshape(1, 1, 1, k)
    b = bias.reshape(1) if bias is not None else None
    out = F.conv2d(img, kernel, b)  # [M*t, 1, n, 1]
    return out.reshape(M, t, n).transpose(0, 2, 1).reshape(*lead, n, t)


def baseline_agg(h: Tensor, nbrs, kind: str, gin_eps: Tensor | None = None) -> Tensor:
    """Weight-shared aggregators: max-relative, mean (SAGE) and sum (GIN)."""
    idx = _as_nbr_array(nbrs)
    if kind not in ("max_relative", "sage_mean", "gin_sum"):
        raise ValueError(f"unknown aggregator {kind!r}; expected one of {AGGREGATORS}")
    g = F.gather_neighbors(h, idx)  # [..., n, k, t]
    if kind == "max_relative":
        *lead, n, t = h.shape
        return (g - h.reshape(*lead, n, 1, t)).max(axis=-2)
    if kind == "sage_mean":
        return g.mean(axis=-2)
    eps = gin_eps if gin_eps is not None else 0.0
    return h * (1.0 + eps) + g.sum(axis=-2)


def vertex_update(h: Tensor, g: Tensor, linear: Linear, norm: BatchNorm) -> Tensor:
    """h' = GeLU(BatchNorm(Linear([h || g]))) with Linear: 2t -> t."""
    if h.shape != g.shape:
        raise ValueError(f"vertex_update: h {h.shape} and g {g.shape} differ")
    return F.gelu(norm(linear(concat([h, g], axis=-1))))


def transform_ffn(G: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Y = GeLU(G W1) W2 + G."""
    return F.linear(F.gelu(F.linear(G, w1)), w2) + G


class SwGModule(Module):
    """Dynamic graph convolution over sliding time windows.

    Input and output are [B, T, F, C] tensors. Parameters are shared by all
    windows; neighbour lists are rebuilt from the current input on every call.
    """

    def __init__(self, t: int, k: int, rng: np.random.Generator, aggregator: str = "conv2d_agg",
                 ratio: int = 4, dtype=np.float64):
        if aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {aggregator!r}; expected one of {AGGREGATORS}")
        self.t, self.k, self.aggregator = t, k, aggregator
        if aggregator == "conv2d_agg":
            self.agg_weight = Parameter(rng.uniform(-1, 1, size=(1, 1, 1, k)) / np.sqrt(k), dtype=dtype)
            self.agg_bias = Parameter(np.zeros(1), dtype=dtype)
        elif aggregator == "gin_sum":
            self.gin_eps = Parameter(np.zeros(()), dtype=dtype)
        self.update = Linear(2 * t, t, rng, dtype=dtype)
        self.update_norm = BatchNorm(t, axis=-1, dtype=dtype)
        self.w1 = Parameter(rng.uniform(-1, 1, size=(t, ratio * t)) / np.sqrt(t), dtype=dtype)
        self.w2 = Parameter(rng.uniform(-1, 1, size=(ratio * t, t)) / np.sqrt(ratio * t), dtype=dtype)
        self.last_neighbors: np.ndarray | None = None
        self.last_input: np.ndarray | None = None

    def aggregate(self, h: Tensor, idx: np.ndarray) -> Tensor:
        if self.aggregator == "conv2d_agg":
            return conv2d_agg(h, idx, self.agg_weight, self.agg_bias)
        return baseline_agg(h, idx, self.aggregator, getattr(self, "gin_eps", None))

    def forward(self, x: Tensor) -> Tensor:
        B, T, nf, nc = x.shape
        t, n = self.t, nf * nc
        N = check_window(T, t)
        if not self.k < n:
            raise ValueError(f"k={self.k} neighbours requires k < F*C={n}")
        h = x.reshape(B, N, t, n).transpose(0, 1, 3, 2)  # [B, N, n, t]
        idx = knn_indices(h.data, self.k)
        self.last_input, self.last_neighbors = h.data, idx
        g = self.aggregate(h, idx)
        h2 = vertex_update(h, g, self.update, self.update_norm)
        y = transform_ffn(h2, self.w1, self.w2)
        return y.transpose(0, 1, 3, 2).reshape(B, T, nf, nc)


def swg_module_forward(x: Tensor, module: SwGModule) -> Tensor:
    """Apply ``module`` to a single [T, F, C] map or a [B, T, F, C] batch."""
    if x.ndim == 3:
        return module(x.reshape(1, *x.shape)).reshape(x.shape)
    return module(x)
