"""Cluster averaging, neighbour-average regressors and the Helmert/between-cluster transform."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .panel import GROUP_B, GROUP_F, ClusterMap, NetworkStack, PanelDataset, check_dataset

# clusters larger than this are re-summed along a contiguous axis so numpy's
# pairwise summation applies
_PAIRWISE_MIN = 4096


def _cluster_sums(values: np.ndarray, clusters: ClusterMap) -> np.ndarray:
    ordered = values[clusters._order]
    sums = np.add.reduceat(ordered, clusters._starts, axis=0)
    for c in np.flatnonzero(clusters.sizes > _PAIRWISE_MIN):
        s = clusters._starts[c]
        block = np.ascontiguousarray(np.moveaxis(ordered[s:s + clusters.sizes[c]], 0, -1))
        sums[c] = block.sum(axis=-1)
    return sums


def cluster_average(values, clusters: ClusterMap) -> np.ndarray:
    """Replace each unit's value by the mean over its cluster (itself included).

    ``values`` may carry trailing dimensions (periods, components); averaging
    is over the leading unit axis only.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] != clusters.n:
        raise ValueError(f"expected {clusters.n} units, got {values.shape[0]}")
    sizes = clusters.sizes.reshape((-1,) + (1,) * (values.ndim - 1))
    means = _cluster_sums(values, clusters) / sizes
    return means[clusters.cluster_of]


def cluster_demean(values, clusters: ClusterMap) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return values - cluster_average(values, clusters)


def _row_mean_operator(a: sp.csr_matrix) -> sp.csr_matrix:
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    np.divide(1.0, deg, out=inv, where=deg > 0)
    return (sp.diags(inv) @ a).tocsr()


def neighbor_average_regressor(data: PanelDataset, nets: NetworkStack, t: int, layer: int,
                               source) -> np.ndarray:
    """Mean of cluster-demeaned period ``t-1`` outcomes over source-group in-neighbours.

    The cluster mean subtracted from ``y[j, t-1]`` is that of the neighbour
    ``j``'s own cluster. Units without such neighbours get 0.
    """
    if not 1 <= t <= data.T:
        raise ValueError(f"t must lie in 1..{data.T}, got {t}")
    demeaned = cluster_demean(data.y[:, t - 1], data.clusters)
    op = _row_mean_operator(nets.block(t - 1, layer, data.partition, source))
    return op @ demeaned


def neighbor_averages(data: PanelDataset, nets: NetworkStack) -> np.ndarray:
    """All neighbour averages, shape ``(n, T, 2L)``.

    Component order: layers 1..L with bank sources, then layers 1..L with
    firm sources.
    """
    n, T, L = data.n, data.T, nets.L
    demeaned = cluster_demean(data.y[:, :T], data.clusters)  # periods 0..T-1
    out = np.zeros((n, T, 2 * L))
    for k, source in enumerate((GROUP_B, GROUP_F)):
        if nets.static_flag:
            for layer in range(1, L + 1):
                op = _row_mean_operator(nets.block(0, layer, data.partition, source))
                out[:, :, k * L + layer - 1] = op @ demeaned
        else:
            for t in range(1, T + 1):
                for layer in range(1, L + 1):
                    op = _row_mean_operator(nets.block(t - 1, layer, data.partition, source))
                    out[:, t - 1, k * L + layer - 1] = op @ demeaned[:, t - 1]
    return out


@dataclass(frozen=True)
class RegressorPanel:
    """Stacked regressors ``W`` with shape ``(n, T, d_W)``; ``W[:, t-1]`` is period t.

    Columns: lagged own outcome, bank-source neighbour averages per layer,
    firm-source neighbour averages per layer, covariates.
    """

    W: np.ndarray
    L: int
    p: int

    @property
    def d_W(self) -> int:
        return self.W.shape[2]

    def column_names(self) -> list[str]:
        return (["lag_y"]
                + [f"nbr_B_l{l}" for l in range(1, self.L + 1)]
                + [f"nbr_F_l{l}" for l in range(1, self.L + 1)]
                + [f"x{k}" for k in range(1, self.p + 1)])

    def source_index(self, source, layer: int = 1) -> int:
        """Column holding the neighbour average from ``source`` on ``layer``."""
        from .panel import group_code
        return 1 + group_code(source) * self.L + (layer - 1)


def build_regressors(data: PanelDataset, nets: NetworkStack, validate: bool = True
                     ) -> RegressorPanel:
    if validate:
        check_dataset(data, nets)
    T = data.T
    lag = data.y[:, :T, None]
    W = np.concatenate([lag, neighbor_averages(data, nets), data.X], axis=2)
    return RegressorPanel(W=W, L=nets.L, p=data.p)


@dataclass(frozen=True)
class HelmertWeights:
    """Forward orthogonal deviation weights.

    ``matrix[t-1, s-1]`` holds ``h(s, t)`` for ``t = 1..T-1`` and ``s = 1..T``
    (zero for ``s < t``).
    """

    T: int
    matrix: np.ndarray

    def h(self, s: int, t: int) -> float:
        if not (1 <= t <= self.T - 1 and t <= s <= self.T):
            raise IndexError(f"h({s},{t}) undefined for T={self.T}")
        return float(self.matrix[t - 1, s - 1])


def helmert_weights(T: int) -> HelmertWeights:
    if T < 2:
        raise ValueError(f"Helmert weights need T >= 2, got {T}")
    H = np.zeros((T - 1, T))
    for t in range(1, T):
        r = T - t
        H[t - 1, t - 1] = np.sqrt(r / (r + 1.0))
        H[t - 1, t:] = -1.0 / np.sqrt(r * (r + 1.0))
    H.setflags(write=False)
    return HelmertWeights(T=T, matrix=H)


def helmert_cluster_transform(series, clusters: ClusterMap, weights: HelmertWeights
                              ) -> np.ndarray:
    """Cluster-demean each period then apply forward orthogonal deviations.

    ``series`` has shape ``(n, T)`` or ``(n, T, k)`` covering periods 1..T;
    an outcome matrix covering 0..T (``T+1`` columns) is accepted and its
    period-0 column dropped. Output covers periods 1..T-1.
    """
    x = np.asarray(series, dtype=float)
    T = weights.T
    if x.ndim < 2:
        raise ValueError("series needs a unit axis and a period axis")
    if x.shape[1] == T + 1:
        x = x[:, 1:]
    if x.shape[1] != T or x.shape[0] != clusters.n:
        raise ValueError(f"series shape {x.shape} incompatible with n={clusters.n}, T={T}")
    d = cluster_demean(x, clusters)
    return np.einsum("ts,ns...->nt...", weights.matrix, d)
