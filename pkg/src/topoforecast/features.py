"""Feature pipeline: standardization, multi-granularity fusion, windowing,
and chronological splitting.

Raw traces become model inputs in four steps: per-service per-metric
standardization with train-split statistics, first-order neighborhood
aggregation over the call graph, cluster-level averaging, and
concatenation into fused windows of width 3d. Targets are the
standardized designated metric over the following H steps, at service
and cluster granularity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .graph import ServiceGraph, neighborhood_aggregate, row_normalize, with_direction

__all__ = [
    "FeatureError",
    "WindowError",
    "LoadSeries",
    "Standardizer",
    "FusedWindowBatch",
    "SplitRanges",
    "SIGMA_FLOOR",
    "fit_standardizer",
    "standardize",
    "destandardize",
    "global_feature",
    "fused_feature_series",
    "fuse_window",
    "build_windows",
    "chronological_split",
    "valid_window_positions",
    "prepare_datasets",
]

SIGMA_FLOOR = 1e-6


class FeatureError(ValueError):
    """Inconsistent series/standardizer inputs."""


class WindowError(ValueError):
    """Requested window does not fit inside the series."""


@dataclass(frozen=True)
class LoadSeries:
    """Uniform-grid multivariate load observations for every service.

    values has shape [n_services, n_steps, d]; all services share the
    grid, whose timestamps are start_timestamp + i * step_seconds.
    """

    services: tuple
    metric_names: tuple
    values: np.ndarray = field(repr=False)
    step_seconds: int = 60
    start_timestamp: int = 0

    def __post_init__(self):
        object.__setattr__(self, "services", tuple(self.services))
        object.__setattr__(self, "metric_names", tuple(self.metric_names))
        vals = np.asarray(self.values, dtype=np.float64)
        if (vals.ndim != 3 or vals.shape[0] != len(self.services)
                or vals.shape[2] != len(self.metric_names)):
            raise FeatureError(
                f"values must have shape [services={len(self.services)}, time, "
                f"metrics={len(self.metric_names)}], got {vals.shape}"
            )
        if len(self.metric_names) < 1:
            raise FeatureError("need at least one metric")
        if not np.all(np.isfinite(vals)):
            raise FeatureError("series contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def n_services(self) -> int:
        return len(self.services)

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_metrics(self) -> int:
        return len(self.metric_names)

    def timestamps(self) -> np.ndarray:
        return self.start_timestamp + np.arange(self.n_steps) * self.step_seconds

    def metric_index(self, name: str) -> int:
        try:
            return self.metric_names.index(name)
        except ValueError:
            raise FeatureError(
                f"unknown metric {name!r}; series has {list(self.metric_names)}"
            ) from None


@dataclass(frozen=True)
class Standardizer:
    """Per-service, per-metric mean/std fitted on the training range only.

    Stored std is floored at sigma_floor so constant metrics standardize
    to exactly zero instead of dividing by zero.
    """

    services: tuple
    metric_names: tuple
    mean: np.ndarray = field(repr=False)
    std: np.ndarray = field(repr=False)
    sigma_floor: float = SIGMA_FLOOR

    def _check(self, series: LoadSeries) -> None:
        if series.services != self.services:
            raise FeatureError(
                f"series services {series.services} do not match "
                f"standardizer services {self.services}"
            )
        if series.metric_names != self.metric_names:
            raise FeatureError(
                f"series metrics {series.metric_names} do not match "
                f"standardizer metrics {self.metric_names}"
            )


def fit_standardizer(series: LoadSeries, train_range: tuple,
                     sigma_floor: float = SIGMA_FLOOR) -> Standardizer:
    """Fit population mean/std over the half-open step range [start, stop)."""
    start, stop = int(train_range[0]), int(train_range[1])
    if not 0 <= start < stop <= series.n_steps:
        raise FeatureError(f"empty or out-of-range training interval ({start}, {stop})")
    window = series.values[:, start:stop, :]
    mean = window.mean(axis=1)
    std = window.std(axis=1)
    std = np.maximum(std, sigma_floor)
    return Standardizer(series.services, series.metric_names, mean, std, sigma_floor)


def standardize(series: LoadSeries, s: Standardizer) -> LoadSeries:
    s._check(series)
    vals = (series.values - s.mean[:, None, :]) / s.std[:, None, :]
    return replace(series, values=vals)


def destandardize(series: LoadSeries, s: Standardizer) -> LoadSeries:
    s._check(series)
    vals = series.values * s.std[:, None, :] + s.mean[:, None, :]
    return replace(series, values=vals)


def global_feature(standardized_at_t: np.ndarray) -> np.ndarray:
    """Cluster-level view: the mean over services of standardized metrics."""
    x = np.asarray(standardized_at_t, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise FeatureError(f"need a [services, metrics] matrix with >=1 service, got {x.shape}")
    return x.mean(axis=0)


def fused_feature_series(series: LoadSeries, graph: ServiceGraph, s: Standardizer,
                         neighbor_direction: str = "out") -> np.ndarray:
    """Standardize and fuse the whole series: [services, time, 3d].

    Feature layout along the last axis is fixed: own standardized metrics,
    then the neighborhood aggregate, then the cluster mean broadcast to
    every service.
    """
    if graph.services != series.services:
        raise FeatureError(
            f"graph services {graph.services} do not match series {series.services}"
        )
    tilde = standardize(series, s).values
    effective = row_normalize(with_direction(graph, neighbor_direction))
    hood = neighborhood_aggregate(effective, tilde)
    cluster = tilde.mean(axis=0)
    broad = np.broadcast_to(cluster, tilde.shape)
    return np.concatenate([tilde, hood, broad], axis=2)


@dataclass(frozen=True)
class FusedWindowBatch:
    """Model-ready fused windows plus aligned service/cluster targets.

    inputs: [n, T, 3d], service_targets / cluster_targets: [n, H], both in
    standardized units. The input window [t-T+1, t] strictly precedes the
    target window [t+1, t+H]. Samples are ordered by (service, t).
    """

    inputs: np.ndarray = field(repr=False)
    service_targets: np.ndarray = field(repr=False)
    cluster_targets: np.ndarray = field(repr=False)
    service_index: np.ndarray = field(repr=False)
    t_index: np.ndarray = field(repr=False)
    window: int = 0
    horizon: int = 0
    target_metric: str = ""

    def __post_init__(self):
        n = self.inputs.shape[0]
        if not (self.service_targets.shape[0] == self.cluster_targets.shape[0]
                == self.service_index.shape[0] == self.t_index.shape[0] == n):
            raise FeatureError("batch arrays disagree on sample count")

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]


def fuse_window(series: LoadSeries, graph: ServiceGraph, s: Standardizer,
                service: str, t: int, window: int, horizon: int,
                target_metric: str, neighbor_direction: str = "out"):
    """Build one fused sample for (service, t).

    Returns (z, y, g): the [T, 3d] fused input covering steps [t-T+1, t],
    the service's standardized target metric over [t+1, t+H], and the
    cluster mean of that metric over the same horizon.
    """
    if t - window + 1 < 0 or t + horizon >= series.n_steps:
        raise WindowError(
            f"window [{t - window + 1}, {t + horizon}] out of range for "
            f"{series.n_steps} steps (t={t}, T={window}, H={horizon})"
        )
    if service not in series.services:
        raise FeatureError(f"unknown service {service!r}")
    si = series.services.index(service)
    m = series.metric_index(target_metric)
    fused = fused_feature_series(series, graph, s, neighbor_direction)
    tilde = standardize(series, s).values
    z = fused[si, t - window + 1 : t + 1, :]
    y = tilde[si, t + 1 : t + horizon + 1, m]
    g = tilde[:, t + 1 : t + horizon + 1, m].mean(axis=0)
    return z, y, g


def valid_window_positions(step_range: tuple, window: int, horizon: int) -> np.ndarray:
    """All t whose full input+target span [t-T+1, t+H] lies in [start, stop)."""
    start, stop = int(step_range[0]), int(step_range[1])
    lo = start + window - 1
    hi = stop - 1 - horizon
    if hi < lo:
        return np.empty(0, dtype=np.int64)
    return np.arange(lo, hi + 1, dtype=np.int64)


def build_windows(series: LoadSeries, graph: ServiceGraph, s: Standardizer,
                  step_range: tuple, window: int, horizon: int,
                  target_metric: str, neighbor_direction: str = "out",
                  fused: np.ndarray = None) -> FusedWindowBatch:
    """Materialise every valid (service, t) sample inside a step range.

    Pass a precomputed fused_feature_series array to avoid recomputing it
    for each split; it is sliced, never mutated.
    """
    if fused is None:
        fused = fused_feature_series(series, graph, s, neighbor_direction)
    m = series.metric_index(target_metric)
    tilde = standardize(series, s).values
    cluster_target_series = tilde[:, :, m].mean(axis=0)

    positions = valid_window_positions(step_range, window, horizon)
    n_svc = series.n_services
    n = n_svc * positions.size
    d_in = fused.shape[2]
    inputs = np.empty((n, window, d_in))
    y = np.empty((n, horizon))
    g = np.empty((n, horizon))
    svc_idx = np.empty(n, dtype=np.int64)
    t_idx = np.empty(n, dtype=np.int64)

    k = 0
    for si in range(n_svc):
        for t in positions:
            inputs[k] = fused[si, t - window + 1 : t + 1, :]
            y[k] = tilde[si, t + 1 : t + horizon + 1, m]
            g[k] = cluster_target_series[t + 1 : t + horizon + 1]
            svc_idx[k] = si
            t_idx[k] = t
            k += 1
    return FusedWindowBatch(inputs, y, g, svc_idx, t_idx, window, horizon, target_metric)


@dataclass(frozen=True)
class SplitRanges:
    """Half-open [start, stop) step ranges for train/val/test."""

    train: tuple
    val: tuple
    test: tuple


def _min_series_length(window: int, horizon: int, ratios: tuple) -> int:
    need = window + horizon
    total = sum(ratios)
    n = need * total // min(ratios)
    while True:
        a = n * ratios[0] // total
        b = n * (ratios[0] + ratios[1]) // total
        if a >= need and (b - a) >= need and (n - b) >= need:
            return n
        n += 1


def chronological_split(n_steps: int, window: int, horizon: int,
                        ratios: tuple = (8, 1, 1)) -> SplitRanges:
    """Contiguous ordered train/val/test ranges in the given proportions.

    A sample belongs to a split only when its full input+target span lies
    inside that split's range, so windows never straddle a boundary.
    """
    total = sum(ratios)
    a = n_steps * ratios[0] // total
    b = n_steps * (ratios[0] + ratios[1]) // total
    need = window + horizon
    lengths = (a, b - a, n_steps - b)
    if min(lengths) < need:
        minimum = _min_series_length(window, horizon, ratios)
        raise WindowError(
            f"series of {n_steps} steps is too short for T={window}, H={horizon} "
            f"with a {ratios[0]}:{ratios[1]}:{ratios[2]} split "
            f"(split lengths {lengths}, each needs >= {need}); "
            f"minimum series length is {minimum}"
        )
    return SplitRanges((0, a), (a, b), (b, n_steps))


def prepare_datasets(series: LoadSeries, graph: ServiceGraph, window: int,
                     horizon: int, target_metric: str,
                     neighbor_direction: str = "out",
                     ratios: tuple = (8, 1, 1)):
    """Split, fit the standardizer on train only, and window all three splits.

    Returns (splits, standardizer, train/val/test FusedWindowBatch).
    """
    splits = chronological_split(series.n_steps, window, horizon, ratios)
    s = fit_standardizer(series, splits.train)
    fused = fused_feature_series(series, graph, s, neighbor_direction)
    batches = tuple(
        build_windows(series, graph, s, rng, window, horizon, target_metric,
                      neighbor_direction, fused=fused)
        for rng in (splits.train, splits.val, splits.test)
    )
    return splits, s, batches
