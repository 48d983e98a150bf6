"""Service invocation graph: weighted adjacency, neighborhood aggregation,
and per-service adjacency strength.

The adjacency convention is A[i, j] > 0 when service i calls service j.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GraphError",
    "ServiceGraph",
    "row_normalize",
    "with_direction",
    "neighborhood_aggregate",
    "adjacency_strength",
]

DIRECTIONS = ("out", "in", "both")


class GraphError(ValueError):
    """Invalid graph construction or use."""


@dataclass(frozen=True)
class ServiceGraph:
    """Ordered services plus a square nonnegative weight matrix.

    The service list fixes row/column order in the adjacency matrix.
    Instances are immutable and safe to share across threads.
    """

    services: tuple
    adjacency: np.ndarray = field(repr=False)
    row_normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "services", tuple(self.services))
        adj = np.array(self.adjacency, dtype=np.float64)
        n = len(self.services)
        if adj.shape != (n, n):
            raise GraphError(
                f"adjacency must be {n}x{n} for {n} services, got {adj.shape}"
            )
        if not np.all(np.isfinite(adj)):
            raise GraphError("adjacency contains non-finite weights")
        if np.any(adj < 0.0):
            raise GraphError("adjacency weights must be nonnegative")
        if self.row_normalized:
            sums = adj.sum(axis=1)
            bad = np.where((sums > 0) & (np.abs(sums - 1.0) > 1e-9))[0]
            if bad.size:
                raise GraphError(
                    f"row_normalized flag set but rows {bad.tolist()} do not sum to 1"
                )
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    @property
    def n_services(self) -> int:
        return len(self.services)

    def index_of(self, service: str) -> int:
        try:
            return self.services.index(service)
        except ValueError:
            raise GraphError(f"unknown service {service!r}") from None


def row_normalize(graph: ServiceGraph) -> ServiceGraph:
    """Divide each nonzero row by its sum; all-zero rows stay zero."""
    adj = np.array(graph.adjacency)
    sums = adj.sum(axis=1, keepdims=True)
    nonzero = sums[:, 0] > 0
    adj[nonzero] /= sums[nonzero]
    return ServiceGraph(graph.services, adj, row_normalized=True)


def with_direction(graph: ServiceGraph, direction: str) -> ServiceGraph:
    """Reorient raw call weights for aggregation.

    "out" keeps A (a service aggregates the services it calls), "in" uses
    A^T (aggregates its callers), "both" averages the two.
    """
    if direction not in DIRECTIONS:
        raise GraphError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    a = graph.adjacency
    if direction == "out":
        oriented = a
    elif direction == "in":
        oriented = a.T
    else:
        oriented = (a + a.T) / 2.0
    return ServiceGraph(graph.services, oriented, row_normalized=False)


def neighborhood_aggregate(graph: ServiceGraph, features: np.ndarray) -> np.ndarray:
    """First-order neighborhood aggregation h = A @ x over the service axis.

    Accepts per-service features of shape [n, d] or [n, time, d]; the
    service axis is always the first. The graph must be row-normalized so
    aggregates stay on the same scale as the inputs regardless of fan-out.
    """
    if not graph.row_normalized:
        raise GraphError("neighborhood_aggregate requires a row-normalized graph")
    x = np.asarray(features, dtype=np.float64)
    n = graph.n_services
    if x.ndim < 1 or x.shape[0] != n:
        raise GraphError(
            f"feature matrix has {x.shape[0] if x.ndim else 0} rows "
            f"but the graph has {n} services"
        )
    return np.tensordot(graph.adjacency, x, axes=(1, 0))


def adjacency_strength(graph: ServiceGraph) -> np.ndarray:
    """Combined in+out degree per service, normalized by the maximum.

    Defined on raw (un-normalized) weights: s_i = (row_i + col_i) / max_k,
    with max taken as 1 when the graph has no edges. Values lie in [0, 1];
    isolated services get 0.
    """
    if graph.row_normalized:
        raise GraphError("adjacency_strength is defined on raw weights; "
                         "compute it before row_normalize")
    a = graph.adjacency
    combined = a.sum(axis=1) + a.sum(axis=0)
    peak = combined.max() if combined.size else 0.0
    if peak <= 0.0:
        return np.zeros(graph.n_services)
    return combined / peak
