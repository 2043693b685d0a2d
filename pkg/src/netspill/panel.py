"""Panel data model: group partition, cluster map, network stack and validation.

Time convention used throughout the package: outcomes ``y`` cover periods
``0..T``, covariates and estimating equations cover ``1..T``, and the
network stored at index ``t - 1`` governs the lagged outcome entering the
equation for period ``t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

GROUP_B = 0
GROUP_F = 1
GROUP_NAMES = ("B", "F")


def group_code(label) -> int:
    if isinstance(label, (int, np.integer)):
        if int(label) in (GROUP_B, GROUP_F):
            return int(label)
    elif str(label).upper() in GROUP_NAMES:
        return GROUP_NAMES.index(str(label).upper())
    raise ValueError(f"unknown group label {label!r}; expected 'B' or 'F'")


@dataclass(frozen=True)
class GroupPartition:
    group_of: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.group_of, dtype=np.int8)
        if g.ndim != 1:
            raise ValueError("group_of must be one-dimensional")
        if np.any((g != GROUP_B) & (g != GROUP_F)):
            raise ValueError("group codes must be 0 (B) or 1 (F)")
        g.setflags(write=False)
        object.__setattr__(self, "group_of", g)

    @property
    def n(self) -> int:
        return self.group_of.shape[0]

    @property
    def n_B(self) -> int:
        return int(np.count_nonzero(self.group_of == GROUP_B))

    @property
    def n_F(self) -> int:
        return int(np.count_nonzero(self.group_of == GROUP_F))

    def mask(self, group: int) -> np.ndarray:
        return self.group_of == group_code(group)

    def members(self, group) -> np.ndarray:
        return np.flatnonzero(self.mask(group))


@dataclass(frozen=True)
class ClusterMap:
    """Static cluster labels ``0..c-1`` per unit.

    Units are also kept sorted by cluster so that cluster sums can be taken
    over contiguous slices.
    """

    cluster_of: np.ndarray
    _order: np.ndarray = field(init=False, repr=False, compare=False)
    _starts: np.ndarray = field(init=False, repr=False, compare=False)
    _sizes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        raw = np.asarray(self.cluster_of)
        if raw.ndim != 1:
            raise ValueError("cluster_of must be one-dimensional")
        # relabel densely in order of first appearance
        _, first, inverse = np.unique(raw, return_index=True, return_inverse=True)
        rank = np.empty_like(first)
        rank[np.argsort(first, kind="stable")] = np.arange(first.size)
        labels = rank[inverse].astype(np.int64)
        labels.setflags(write=False)
        order = np.argsort(labels, kind="stable")
        sizes = np.bincount(labels, minlength=first.size)
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        for arr in (order, sizes, starts):
            arr.setflags(write=False)
        object.__setattr__(self, "cluster_of", labels)
        object.__setattr__(self, "_order", order)
        object.__setattr__(self, "_starts", starts)
        object.__setattr__(self, "_sizes", sizes)

    @property
    def n(self) -> int:
        return self.cluster_of.shape[0]

    @property
    def n_clusters(self) -> int:
        return self._sizes.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return self._sizes

    def members_of_cluster(self, c: int) -> np.ndarray:
        s = self._starts[c]
        return self._order[s:s + self._sizes[c]]


def cluster_members(clusters: ClusterMap, i: int) -> np.ndarray:
    """Units sharing unit ``i``'s cluster, ``i`` included, in ascending order."""
    if not 0 <= int(i) < clusters.n:
        raise IndexError(f"unit id {i} outside 0..{clusters.n - 1}")
    return np.sort(clusters.members_of_cluster(clusters.cluster_of[int(i)]))


@dataclass(frozen=True)
class PanelDataset:
    """Strongly balanced panel.

    ``y`` has shape ``(n, T + 1)`` (periods 0..T) and ``X`` has shape
    ``(n, T, p)`` where ``X[:, t - 1]`` holds the covariates of period t.
    """

    y: np.ndarray
    X: np.ndarray
    partition: GroupPartition
    clusters: ClusterMap
    unit_ids: tuple | None = None
    period_labels: tuple | None = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        X = np.array(self.X, dtype=float)
        if y.ndim != 2:
            raise ValueError("y must be a (n, T+1) matrix")
        if X.ndim == 2 and X.shape[1] == 0:
            X = X.reshape(y.shape[0], y.shape[1] - 1, 0)
        if X.ndim != 3:
            raise ValueError("X must be a (n, T, p) tensor")
        if X.shape[:2] != (y.shape[0], y.shape[1] - 1):
            raise ValueError(
                f"X shape {X.shape} does not match y shape {y.shape}: "
                "expected (n, T, p) with y of shape (n, T+1)")
        if self.partition.n != y.shape[0] or self.clusters.n != y.shape[0]:
            raise ValueError("partition/cluster sizes do not match number of units")
        y.setflags(write=False)
        X.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1] - 1

    @property
    def p(self) -> int:
        return self.X.shape[2]


class NetworkStack:
    """Directed in-neighbourhoods per (period, layer).

    ``adjacency[t][l]`` is an ``n x n`` CSR matrix with a one at ``(i, j)``
    when ``j`` is an in-neighbour of ``i``; index ``t`` runs over 0..T-1.
    A static stack stores one list of layers reused for every period.
    """

    def __init__(self, adjacency, n_periods: int | None = None, static: bool = False):
        if static:
            layers = [sp.csr_matrix(a, dtype=np.float64, copy=True) for a in adjacency]
            self._periods = [layers]
            if n_periods is None:
                raise ValueError("static stacks need n_periods")
        else:
            self._periods = [[sp.csr_matrix(a, dtype=np.float64, copy=True) for a in per]
                             for per in adjacency]
            n_periods = len(self._periods)
        self.static_flag = bool(static)
        self.n_periods = int(n_periods)
        first = self._periods[0]
        self.L = len(first)
        if self.L < 1:
            raise ValueError("network stack needs at least one layer")
        self.n = first[0].shape[0]
        for per in self._periods:
            if len(per) != self.L:
                raise ValueError("every period must carry the same number of layers")
            for a in per:
                if a.shape != (self.n, self.n):
                    raise ValueError("adjacency matrices must be n x n")
                a.sum_duplicates()
                a.eliminate_zeros()
                a.data[:] = 1.0
                a.sort_indices()

    @classmethod
    def from_edges(cls, n: int, n_periods: int, n_layers: int, edges: Sequence,
                   ) -> "NetworkStack":
        """Build from ``(layer, period_or_None, src, dst)`` tuples.

        Layers are 1-based. ``period=None`` marks a static edge present in
        every period. The stack is static when every edge is.
        """
        static = all(e[1] is None for e in edges)
        if static:
            rows = [[] for _ in range(n_layers)]
            cols = [[] for _ in range(n_layers)]
            for layer, _, src, dst in edges:
                rows[layer - 1].append(dst)
                cols[layer - 1].append(src)
            mats = [sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
                    for r, c in zip(rows, cols)]
            return cls(mats, n_periods=n_periods, static=True)
        rows = [[[] for _ in range(n_layers)] for _ in range(n_periods)]
        cols = [[[] for _ in range(n_layers)] for _ in range(n_periods)]
        for layer, period, src, dst in edges:
            periods = range(n_periods) if period is None else [period]
            for t in periods:
                rows[t][layer - 1].append(dst)
                cols[t][layer - 1].append(src)
        mats = [[sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
                 for r, c in zip(rp, cp)] for rp, cp in zip(rows, cols)]
        return cls(mats)

    def adjacency(self, t: int, layer: int) -> sp.csr_matrix:
        """Adjacency of the 1-based ``layer`` at network index ``t``."""
        if not 0 <= t < self.n_periods:
            raise IndexError(f"network period {t} outside 0..{self.n_periods - 1}")
        per = self._periods[0] if self.static_flag else self._periods[t]
        return per[layer - 1]

    def block(self, t: int, layer: int, partition: GroupPartition, source) -> sp.csr_matrix:
        """Adjacency restricted to in-neighbours from the ``source`` group."""
        a = self.adjacency(t, layer)
        keep = sp.diags(partition.mask(source).astype(np.float64))
        return (a @ keep).tocsr()

    def in_neighbors(self, t: int, layer: int, i: int, partition: GroupPartition | None = None,
                     source=None) -> np.ndarray:
        a = self.adjacency(t, layer)
        nb = a.indices[a.indptr[i]:a.indptr[i + 1]]
        if source is not None:
            nb = nb[partition.group_of[nb] == group_code(source)]
        return np.array(nb)

    def edges(self):
        """Yield ``(layer, period_or_None, src, dst)``; period is None when static."""
        for t, per in enumerate(self._periods):
            for layer, a in enumerate(per, start=1):
                coo = a.tocoo()
                order = np.lexsort((coo.col, coo.row))
                for dst, src in zip(coo.row[order], coo.col[order]):
                    yield layer, (None if self.static_flag else t), int(src), int(dst)

    def in_degrees(self, t: int = 0, partition: GroupPartition | None = None, source=None
                   ) -> np.ndarray:
        """Union in-degree over layers (optionally restricted to one source group)."""
        total = None
        for layer in range(1, self.L + 1):
            a = self.adjacency(t, layer) if source is None else self.block(t, layer, partition, source)
            total = a if total is None else total + a
        total = total.tocsr()
        total.data[:] = 1.0
        return np.asarray(total.sum(axis=1)).ravel()


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    severity: str = "error"


class ValidationError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        msg = "; ".join(v.message for v in self.violations[:5])
        if len(self.violations) > 5:
            msg += f"; ... ({len(self.violations)} violations)"
        super().__init__(msg)


def validate_dataset(data: PanelDataset, nets: NetworkStack) -> list[Violation]:
    """Return every violation found; an empty list means the inputs are usable.

    Singleton clusters are reported with severity ``"warning"``: cluster
    demeaning zeroes them out but they are not invalid.
    """
    out: list[Violation] = []
    n, T = data.n, data.T
    if T < 2:
        out.append(Violation("horizon", f"need T >= 2 (outcomes for periods 0..2), got T={T}"))
    n_nan_y = int(np.count_nonzero(~np.isfinite(data.y)))
    n_nan_x = int(np.count_nonzero(~np.isfinite(data.X)))
    if n_nan_y or n_nan_x:
        out.append(Violation("unbalanced",
                             f"panel not strongly balanced: {n_nan_y} missing/non-finite "
                             f"outcomes, {n_nan_x} missing/non-finite covariates"))
    part = data.partition
    if part.n_B < 1 or part.n_F < 1:
        out.append(Violation("group_empty",
                             f"both groups must be nonempty (n_B={part.n_B}, n_F={part.n_F})"))
    cl = data.clusters
    for c in range(cl.n_clusters):
        members = cl.members_of_cluster(c)
        groups = np.unique(part.group_of[members])
        if groups.size > 1:
            out.append(Violation("mixed_cluster",
                                 f"cluster {c} contains both B and F units"))
        if members.size == 1:
            out.append(Violation("singleton_cluster",
                                 f"cluster {c} has a single unit ({int(members[0])}); "
                                 "it carries no within-cluster variation", "warning"))
    if nets.n != n:
        out.append(Violation("id_out_of_range",
                             f"network has {nets.n} nodes but panel has {n} units"))
        return out
    if nets.n_periods < T:
        out.append(Violation("network_periods",
                             f"network covers {nets.n_periods} periods, need {T} (indices 0..T-1)"))
    periods = [0] if nets.static_flag else range(min(nets.n_periods, T))
    for t in periods:
        for layer in range(1, nets.L + 1):
            a = nets.adjacency(t, layer)
            loops = np.flatnonzero(a.diagonal())
            for i in loops:
                where = "all periods" if nets.static_flag else f"period {t}"
                out.append(Violation("self_loop",
                                     f"unit {int(i)} is its own neighbour in layer {layer} ({where})"))
    return out


def check_dataset(data: PanelDataset, nets: NetworkStack) -> list[Violation]:
    """Raise :class:`ValidationError` on errors, return the warnings otherwise."""
    report = validate_dataset(data, nets)
    errors = [v for v in report if v.severity == "error"]
    if errors:
        raise ValidationError(errors)
    return report
