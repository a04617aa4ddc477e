"""Cross-patient hypergraph: two-pass KNN construction and HGNN propagation.

Vertices are the pixels of an encoder feature map pooled over the whole
batch, so a hyperedge can span several patients.  Topology is selected on
detached features; gradients flow only through the propagation values.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import IO

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class HypergraphError(ValueError):
    pass


@dataclass
class VertexSet:
    """Row-stacked vertex features with their grid provenance."""

    features: Tensor          # N×C
    origin: np.ndarray        # N×3 of (batch, row, col)
    grid_shape: tuple[int, int, int, int]  # B, C, H, W of the source map

    @property
    def num_vertices(self) -> int:
        return self.features.shape[0]


@dataclass
class Hypergraph:
    """One hyperedge per vertex; column j of ``incidence`` is hyperedge e_j."""

    incidence: np.ndarray     # N×N, 0/1
    k: np.ndarray             # neighbours per hyperedge (excluding the anchor)

    @property
    def num_vertices(self) -> int:
        return self.incidence.shape[0]

    @property
    def vertex_degrees(self) -> np.ndarray:
        return self.incidence.sum(axis=1)

    @property
    def edge_degrees(self) -> np.ndarray:
        return self.incidence.sum(axis=0)

    def members(self, j: int) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.incidence[:, j])]


def flatten_features(feature_map: Tensor) -> VertexSet:
    """B×C×H×W → (B·H·W)×C, batch-major then row then column."""
    if feature_map.ndim != 4:
        raise ShapeError("flatten_features", feature_map.shape, detail="expected B×C×H×W")
    B, C, H, W = feature_map.shape
    feats = T.reshape(T.transpose(feature_map, (0, 2, 3, 1)), (B * H * W, C))
    b, r, c = np.meshgrid(np.arange(B), np.arange(H), np.arange(W), indexing="ij")
    origin = np.stack([b.ravel(), r.ravel(), c.ravel()], axis=1)
    return VertexSet(feats, origin, (B, C, H, W))


def unflatten_features(features: Tensor, vertices: VertexSet) -> Tensor:
    """Inverse of :func:`flatten_features` using the stored provenance."""
    B, C, H, W = vertices.grid_shape
    if features.shape != (B * H * W, C):
        raise HypergraphError(f"provenance mismatch: got {features.shape}, expected {(B * H * W, C)}")
    expected = np.stack(np.meshgrid(np.arange(B), np.arange(H), np.arange(W), indexing="ij"), -1).reshape(-1, 3)
    if not np.array_equal(vertices.origin, expected):
        raise HypergraphError("provenance is not the batch-major grid ordering")
    return T.transpose(T.reshape(features, (B, H, W, C)), (0, 3, 1, 2))


def pairwise_sq_distances(x: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact squared Euclidean distances via explicit differences.

    The difference form (rather than |a|²+|b|²-2ab) keeps duplicate vectors
    at distance exactly 0, which the tie-break rule relies on.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    out = np.empty((n, n))
    for s in range(0, n, chunk):
        d = x[s:s + chunk, None, :] - x[None, :, :]
        out[s:s + chunk] = np.einsum("ijk,ijk->ij", d, d)
    return out


def _neighbour_order(dist: np.ndarray) -> np.ndarray:
    """Per row: other vertices sorted by distance, ties to the lower index."""
    n = dist.shape[0]
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, : n - 1]


def _incidence_from_k(order: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = order.shape[0]
    H = np.zeros((n, n), dtype=np.int64)
    H[np.arange(n), np.arange(n)] = 1
    for j in range(n):
        H[order[j, : k[j]], j] = 1
    return H


def _vertex_array(vertices) -> np.ndarray:
    if isinstance(vertices, VertexSet):
        return vertices.features.data
    if isinstance(vertices, Tensor):
        return vertices.data
    return np.asarray(vertices, dtype=np.float64)


def knn_first_pass(vertices, _dist: np.ndarray | None = None) -> Hypergraph:
    """Each hyperedge holds its anchor plus the single nearest other vertex."""
    x = _vertex_array(vertices)
    n = x.shape[0]
    if n < 2:
        raise HypergraphError("KNN needs at least 2 vertices")
    dist = pairwise_sq_distances(x) if _dist is None else _dist
    order = _neighbour_order(dist)
    k = np.ones(n, dtype=np.int64)
    return Hypergraph(_incidence_from_k(order, k), k)


def knn_second_pass(vertices, preliminary: Hypergraph, _dist: np.ndarray | None = None) -> Hypergraph:
    """Re-run KNN with K(j) set to v_j's degree in the preliminary incidence."""
    x = _vertex_array(vertices)
    n = x.shape[0]
    if preliminary.num_vertices != n:
        raise HypergraphError(f"vertex count mismatch: {n} vertices, preliminary graph has {preliminary.num_vertices}")
    if n < 2:
        raise HypergraphError("KNN needs at least 2 vertices")
    dist = pairwise_sq_distances(x) if _dist is None else _dist
    order = _neighbour_order(dist)
    k = np.minimum(preliminary.vertex_degrees.astype(np.int64), n - 1)
    return Hypergraph(_incidence_from_k(order, k), k)


def build_hypergraph(vertices) -> Hypergraph:
    """Two-pass KNN construction sharing one distance matrix."""
    x = _vertex_array(vertices)
    if x.shape[0] < 2:
        raise HypergraphError("KNN needs at least 2 vertices")
    dist = pairwise_sq_distances(x)
    return knn_second_pass(x, knn_first_pass(x, dist), dist)


def propagation_factors(graph: Hypergraph) -> tuple[np.ndarray, np.ndarray]:
    """Constant halves of the normalised operator.

    Returns (left, right) with left = D_v^{-1/2} H and
    right = D_e^{-1} Hᵀ D_v^{-1/2}, so V' = left · W_e · right · V.
    """
    H = graph.incidence.astype(np.float64)
    dv = H.sum(axis=1)
    de = H.sum(axis=0)
    if np.any(dv <= 0) or np.any(de <= 0):
        raise HypergraphError("zero vertex or hyperedge degree")
    inv_sqrt_dv = 1.0 / np.sqrt(dv)
    left = inv_sqrt_dv[:, None] * H
    right = (H.T * inv_sqrt_dv[None, :]) / de[:, None]
    return left, right


def hgnn_propagate(graph: Hypergraph, vertices, edge_weights: Tensor | None = None) -> Tensor:
    """V' = D_v^{-1/2} H W_e D_e^{-1} Hᵀ D_v^{-1/2} V on the autodiff tape.

    ``edge_weights`` is the diagonal of W_e as a length-N tensor (ones when
    omitted).
    """
    V = vertices.features if isinstance(vertices, VertexSet) else vertices
    n = V.shape[0]
    if graph.num_vertices != n:
        raise HypergraphError(f"graph has {graph.num_vertices} vertices, features have {n}")
    left, right = propagation_factors(graph)
    edge_msg = T.matmul(Tensor(right), V)                       # N_e×C
    if edge_weights is not None:
        if edge_weights.shape != (n,):
            raise ShapeError("hgnn_propagate", edge_weights.shape, (n,))
        ones_row = Tensor(np.ones((1, V.shape[1])))
        scale = T.matmul(T.reshape(edge_weights, (n, 1)), ones_row)
        edge_msg = T.mul(edge_msg, scale)
    return T.matmul(Tensor(left), edge_msg)


def fuse(propagated: Tensor, original: Tensor, vertices: VertexSet,
         kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Concatenate [propagated, original] on channels and apply a 1×1 conv (2C→C)."""
    if tuple(original.shape) != tuple(vertices.grid_shape):
        raise HypergraphError(f"provenance mismatch: map {original.shape} vs vertices {vertices.grid_shape}")
    prop_map = unflatten_features(propagated, vertices)
    return T.conv2d(T.concat([prop_map, original], axis=1), kernel, bias, padding="valid")


def dump_incidence(graph: Hypergraph, f: IO[str]) -> None:
    """Write the incidence as sparse coordinates: header, then 'vertex edge' per line."""
    n = graph.num_vertices
    f.write(f"# incidence {n} {n}\n")
    rows, cols = np.nonzero(graph.incidence.T)
    for e, v in zip(rows, cols):
        f.write(f"{v} {e}\n")


def load_incidence(f: IO[str]) -> np.ndarray:
    header = f.readline().split()
    if len(header) != 4 or header[:2] != ["#", "incidence"]:
        raise HypergraphError("not an incidence dump")
    H = np.zeros((int(header[2]), int(header[3])), dtype=np.int64)
    for line in f:
        if line.strip():
            v, e = map(int, line.split())
            H[v, e] = 1
    return H
