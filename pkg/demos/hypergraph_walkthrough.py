"""Build a KNN hypergraph on a toy feature map and push features through it.

    python demos/hypergraph_walkthrough.py
"""
import numpy as np

from rehydil.hypergraph import (build_hypergraph, flatten_features, fuse, hgnn_propagate,
                                knn_first_pass)
from rehydil.tensor import Tensor

rng = np.random.default_rng(0)

# two images, 3 channels, 4x4 spatial grid -> 32 vertices
fmap = Tensor(rng.normal(size=(2, 3, 4, 4)))
vs = flatten_features(fmap)
print("vertices:", vs.features.shape)

first = knn_first_pass(vs)
graph = build_hypergraph(vs)
print("first-pass k per vertex:", first.k[:8], "...")
print("final k per vertex:     ", graph.k[:8], "...")
print("incidence density: %.3f" % graph.incidence.mean())

# hyperedge j holds its anchor v_j plus its k nearest other vertices
assert np.all(np.diag(graph.incidence) == 1)
assert np.array_equal(graph.edge_degrees, graph.k + 1)

out = hgnn_propagate(graph, vs.features)
print("propagated features:", out.shape, "mean |change| %.3f" % np.abs(out.data - vs.features.data).mean())

# the 1x1 fuse starts as the identity on the original map
w = np.zeros((3, 6, 1, 1))
w[np.arange(3), 3 + np.arange(3), 0, 0] = 1.0
fused = fuse(out, fmap, vs, Tensor(w))
print("fused equals original at init:", np.allclose(fused.data, fmap.data))
