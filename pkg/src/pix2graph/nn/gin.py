"""GIN message passing with sum readout."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from pix2graph.errors import ValidationError
from pix2graph.nn.tensor import Tensor, relu, spmm

HIDDEN = 16
N_LAYERS = 2


@dataclass
class GraphBatch:
    """Disjoint union of graphs: node rows, adjacency and a pooling matrix."""

    x: np.ndarray  # N x d
    adjacency: sp.csr_matrix  # N x N, symmetric, no self loops
    pooling: sp.csr_matrix  # B x N, one-hot graph membership
    offsets: np.ndarray  # B+1 node offsets

    @property
    def n_graphs(self) -> int:
        return self.pooling.shape[0]

    @classmethod
    def from_graphs(cls, items: Sequence[tuple[np.ndarray, np.ndarray]], dtype=np.float64) -> "GraphBatch":
        """``items`` is a sequence of (edges E x 2, features n x d)."""
        if not items:
            raise ValidationError("empty graph batch")
        sizes = np.array([np.asarray(x).shape[0] for _, x in items], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        n = int(offsets[-1])
        rows, cols = [], []
        for (edges, _), off in zip(items, offsets[:-1]):
            e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
            rows.append(np.concatenate([e[:, 0], e[:, 1]]) + off)
            cols.append(np.concatenate([e[:, 1], e[:, 0]]) + off)
        r = np.concatenate(rows) if rows else np.zeros(0, np.int64)
        c = np.concatenate(cols) if cols else np.zeros(0, np.int64)
        adj = sp.csr_matrix((np.ones(len(r), dtype=dtype), (r, c)), shape=(n, n))
        adj.sum_duplicates()
        adj.data[:] = 1.0
        membership = np.repeat(np.arange(len(items)), sizes)
        pool = sp.csr_matrix((np.ones(n, dtype=dtype), (membership, np.arange(n))), shape=(len(items), n))
        x = np.concatenate([np.asarray(f, dtype=dtype) for _, f in items], axis=0)
        return cls(x, adj, pool, offsets)


@dataclass
class GinParams:
    """Weights of one GIN feature extractor (Linear-ReLU-Linear per layer)."""

    weights: list[dict[str, Tensor]]
    epsilons: list[float] = field(default_factory=list)

    @property
    def d_in(self) -> int:
        return self.weights[0]["w1"].shape[0]

    @classmethod
    def init(cls, d_in: int, seed: int, index: int, hidden: int = HIDDEN,
             n_layers: int = N_LAYERS, dtype=np.float64) -> "GinParams":
        rng = np.random.default_rng([seed, index])
        layers = []
        dims = [d_in] + [hidden] * n_layers
        for li in range(n_layers):
            layer = {}
            for name, (fi, fo) in (("1", (dims[li], hidden)), ("2", (hidden, dims[li + 1]))):
                bound = np.sqrt(6.0 / (fi + fo))
                layer["w" + name] = Tensor(rng.uniform(-bound, bound, size=(fi, fo)).astype(dtype),
                                           requires_grad=True, name=f"gin{index}.l{li}.w{name}")
                layer["b" + name] = Tensor(np.zeros(fo, dtype=dtype), requires_grad=True,
                                           name=f"gin{index}.l{li}.b{name}")
            layers.append(layer)
        return cls(layers, [0.0] * n_layers)

    def parameters(self) -> list[Tensor]:
        return [layer[k] for layer in self.weights for k in ("w1", "b1", "w2", "b2")]

    def validate(self) -> None:
        prev = self.d_in
        for i, layer in enumerate(self.weights):
            if layer["w1"].shape[0] != prev or layer["w2"].shape[0] != layer["w1"].shape[1]:
                raise ValidationError(f"layer {i} dimensions do not chain")
            prev = layer["w2"].shape[1]
            for t in layer.values():
                if not np.all(np.isfinite(t.data)):
                    raise ValidationError(f"non-finite parameter {t.name}")


def gin_forward(batch: GraphBatch, params: GinParams) -> tuple[Tensor, Tensor]:
    """Return (node embeddings N x hidden, graph embeddings B x hidden)."""
    if batch.x.shape[1] != params.d_in:
        raise ValidationError(f"feature dim {batch.x.shape[1]} != GIN input dim {params.d_in}")
    h = Tensor(batch.x.astype(params.weights[0]["w1"].dtype, copy=False))
    last = len(params.weights) - 1
    for i, (layer, eps) in enumerate(zip(params.weights, params.epsilons)):
        agg = spmm(batch.adjacency, h) + h * (1.0 + eps)
        z = relu(agg @ layer["w1"] + layer["b1"])
        h = z @ layer["w2"] + layer["b2"]
        if i < last:
            h = relu(h)
    return h, spmm(batch.pooling, h)
