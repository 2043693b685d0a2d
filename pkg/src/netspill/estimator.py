"""Two-step GMM on Helmert/between-cluster transformed moments, estimated per group."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import (DegenerateGroupError, EstimationError, IllConditionedWeightError,
                     RankDeficientError)
from .inference import normal_ppf
from .instruments import InstrumentPanel, IvOption, build_instruments
from .panel import GROUP_NAMES, ClusterMap, GroupPartition, NetworkStack, PanelDataset, \
    check_dataset, group_code
from .transforms import (HelmertWeights, RegressorPanel, build_regressors, cluster_demean,
                         helmert_cluster_transform, helmert_weights)

OMEGA_COND_MAX = 1e12
# relative size of transformed residuals below which the model is treated as an exact fit
EXACT_FIT_RTOL = 1e-10


@dataclass(frozen=True)
class MomentSet:
    A: np.ndarray
    B: np.ndarray
    group: str
    n_K: int


def _group_rows(partition: GroupPartition, group) -> np.ndarray:
    rows = partition.members(group)
    if rows.size == 0:
        raise DegenerateGroupError(f"group {GROUP_NAMES[group_code(group)]} has no units",
                                   group=GROUP_NAMES[group_code(group)])
    return rows


def moment_matrices(inst: InstrumentPanel, y_H: np.ndarray, W_H: np.ndarray,
                    clusters: ClusterMap, partition: GroupPartition, group) -> MomentSet:
    """Sample moments ``A = sum_t mean_i Zd_it y^H_it`` and ``B = sum_t mean_i Zd_it W^H_it'``.

    ``Zd`` is the cluster-demeaned instrument; ``y_H`` and ``W_H`` are already
    transformed (periods 1..T-1).
    """
    rows = _group_rows(partition, group)
    Zd = cluster_demean(inst.Z, clusters)[rows]
    n_k = rows.size
    A = np.einsum("ntz,nt->z", Zd, y_H[rows]) / n_k
    B = np.einsum("ntz,ntw->zw", Zd, W_H[rows]) / n_k
    return MomentSet(A=A, B=B, group=GROUP_NAMES[group_code(group)], n_K=n_k)


def _rank_check(M: np.ndarray, group: str | None, names=None) -> None:
    _, R, piv = sla.qr(M, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(M.shape) * np.finfo(float).eps * 1e3 * (diag[0] if diag.size else 0.0)
    rank = int(np.count_nonzero(diag > tol))
    if rank < M.shape[1] or diag.size == 0 or diag[0] == 0:
        bad = sorted(int(c) for c in piv[rank:])
        labels = [names[c] for c in bad] if names is not None else bad
        raise RankDeficientError(
            f"moment matrix B has rank {rank} < {M.shape[1]}; deficient columns: {labels}",
            group=group, columns=labels)


def initial_estimator(m: MomentSet, names=None) -> np.ndarray:
    """Unweighted estimate solving ``min |A - B d|`` by QR least squares."""
    _rank_check(m.B, m.group, names)
    delta, *_ = np.linalg.lstsq(m.B, m.A, rcond=None)
    return delta


def weight_matrix(inst: InstrumentPanel, resid_H: np.ndarray, clusters: ClusterMap,
                  partition: GroupPartition, group) -> np.ndarray:
    """``Omega = mean_i g_i g_i'`` with ``g_i = sum_t Zd_it u^H_it``."""
    rows = _group_rows(partition, group)
    Zd = cluster_demean(inst.Z, clusters)[rows]
    g = np.einsum("ntz,nt->nz", Zd, resid_H[rows])
    omega = g.T @ g / rows.size
    return 0.5 * (omega + omega.T)


def _omega_condition(omega: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(omega)
    if ev[-1] <= 0 or ev[0] <= 0:
        return math.inf
    return float(ev[-1] / ev[0])


def two_step_estimate(m: MomentSet, omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Efficient GMM step: ``(B' Om^-1 B)^-1 B' Om^-1 A`` and ``V = (B' Om^-1 B)^-1``.

    Works through a Cholesky factor of ``Omega`` and a QR factor of the
    whitened ``B``; no explicit inverse of ``Omega`` is formed.
    """
    cond = _omega_condition(omega)
    if not cond <= OMEGA_COND_MAX:
        raise IllConditionedWeightError(
            f"weight matrix Omega is singular or ill-conditioned (condition {cond:.3g} > "
            f"{OMEGA_COND_MAX:.0e}); use more time periods or fewer instruments",
            group=m.group, condition=cond)
    L = np.linalg.cholesky(omega)
    Bw = sla.solve_triangular(L, m.B, lower=True)
    Aw = sla.solve_triangular(L, m.A, lower=True)
    Q, R = np.linalg.qr(Bw)
    if np.min(np.abs(np.diag(R))) <= np.finfo(float).eps * np.max(np.abs(np.diag(R))) * max(Bw.shape):
        raise RankDeficientError("whitened moment matrix is rank deficient", group=m.group,
                                 stage="two_step")
    delta = sla.solve_triangular(R, Q.T @ Aw)
    R_inv = sla.solve_triangular(R, np.eye(R.shape[0]))
    V = R_inv @ R_inv.T
    return delta, 0.5 * (V + V.T)


@dataclass
class GroupEstimate:
    group: str
    n_K: int
    names: list
    L: int
    delta_hat: np.ndarray
    delta_tilde: np.ndarray
    V_hat: np.ndarray
    Omega_hat: np.ndarray
    alpha: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.V_hat), 0.0, None) / self.n_K)

    @property
    def t_stats(self) -> np.ndarray:
        se = self.se
        out = np.full_like(se, np.nan)
        np.divide(self.delta_hat, se, out=out, where=se > 0)
        return out

    @property
    def ci(self) -> np.ndarray:
        z = normal_ppf(1.0 - self.alpha / 2.0)
        se = self.se
        return np.column_stack([self.delta_hat - z * se, self.delta_hat + z * se])

    def source_index(self, source, layer: int = 1) -> int:
        return 1 + group_code(source) * self.L + (layer - 1)

    def coef_labels(self) -> list:
        """Parameter names: ``alpha_K``, ``beta_{source}{K}_l``, ``gamma_K_k``."""
        k = self.group
        out = [f"alpha_{k}"]
        for src in GROUP_NAMES:
            out += [f"beta_{src}{k}_l{l}" for l in range(1, self.L + 1)]
        out += [f"gamma_{k}_{j}" for j in range(1, len(self.names) - 1 - 2 * self.L + 1)]
        return out


@dataclass
class EstimationResult:
    groups: dict
    option: IvOption
    alpha: float
    T: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_B(self) -> int:
        return self.groups["B"].n_K

    @property
    def n_F(self) -> int:
        return self.groups["F"].n_K


@dataclass(frozen=True)
class Pipeline:
    """Intermediate arrays shared by both group estimations."""

    regs: RegressorPanel
    weights: HelmertWeights
    y_H: np.ndarray
    W_H: np.ndarray
    inst: InstrumentPanel


def prepare(data: PanelDataset, nets: NetworkStack, option, validate: bool = True) -> Pipeline:
    if validate:
        check_dataset(data, nets)
    weights = helmert_weights(data.T)
    regs = build_regressors(data, nets, validate=False)
    y_H = helmert_cluster_transform(data.y[:, 1:], data.clusters, weights)
    W_H = helmert_cluster_transform(regs.W, data.clusters, weights)
    try:
        inst = build_instruments(option, regs, W_H, data.clusters)
    except EstimationError as exc:
        exc.details.setdefault("iv_option", IvOption.parse(option).value)
        raise
    return Pipeline(regs=regs, weights=weights, y_H=y_H, W_H=W_H, inst=inst)


def _residual_dof(clusters: ClusterMap, rows: np.ndarray, n_periods: int, d_W: int) -> int:
    """Transformed observations left after the cluster means, minus parameters."""
    sizes = np.bincount(clusters.cluster_of[rows])
    return int(np.clip(sizes - 1, 0, None).sum()) * n_periods - d_W


def estimate_group(pipe: Pipeline, clusters: ClusterMap, partition: GroupPartition, group,
                   alpha: float = 0.05, inst: InstrumentPanel | None = None) -> GroupEstimate:
    inst = pipe.inst if inst is None else inst
    label = GROUP_NAMES[group_code(group)]
    names = pipe.regs.column_names()
    d_W = len(names)
    n_k = int(np.count_nonzero(partition.mask(group)))
    if n_k < d_W:
        raise DegenerateGroupError(
            f"group {label} has {n_k} units but {d_W} parameters; moments cannot identify them",
            group=label)
    try:
        m = moment_matrices(inst, pipe.y_H, pipe.W_H, clusters, partition, group)
        delta_tilde = initial_estimator(m, names)
        resid = pipe.y_H - np.einsum("ntw,w->nt", pipe.W_H, delta_tilde)
        omega = weight_matrix(inst, resid, clusters, partition, group)
        rows = partition.mask(group)
        scale = np.linalg.norm(pipe.y_H[rows])
        # a vanishing residual only signals noiseless data when equations outnumber parameters
        exact = (_residual_dof(clusters, rows, pipe.y_H.shape[1], d_W) > 0
                 and np.linalg.norm(resid[rows]) <= EXACT_FIT_RTOL * max(scale, np.finfo(float).tiny))
        if exact:
            # residual moments vanish: the first-step solution already solves the moments
            delta_hat, V_hat = delta_tilde.copy(), np.zeros((d_W, d_W))
        else:
            delta_hat, V_hat = two_step_estimate(m, omega)
    except EstimationError as exc:
        if exc.group is None:
            exc.group = label
        raise
    diagnostics = {
        "cond_B": float(np.linalg.cond(m.B)),
        "cond_Omega": _omega_condition(omega),
        "exact_fit": bool(exact),
    }
    return GroupEstimate(group=label, n_K=n_k, names=names, L=pipe.regs.L,
                         delta_hat=delta_hat, delta_tilde=delta_tilde, V_hat=V_hat,
                         Omega_hat=omega, alpha=alpha, diagnostics=diagnostics)


def martingale_form(inst: InstrumentPanel, epsilon: np.ndarray, clusters: ClusterMap,
                    weights: HelmertWeights, partition: GroupPartition, group) -> np.ndarray:
    """``sum_s n^-1/2 sum_i Ztilde_is eps_is`` with ``Ztilde_is = sum_{t<=s^(T-1)} h(s,t) Zd_it``.

    ``epsilon`` covers periods 1..T (a leading period-0 column is dropped).
    """
    T = weights.T
    eps = np.asarray(epsilon, dtype=float)
    if eps.shape[1] == T + 1:
        eps = eps[:, 1:]
    rows = partition.members(group)
    Zd = cluster_demean(inst.Z, clusters)[rows]
    Z_tilde = np.einsum("ts,ntz->nsz", weights.matrix, Zd)  # h(s,t)=0 for s<t
    return np.einsum("nsz,ns->z", Z_tilde, eps[rows]) / math.sqrt(rows.size)


def scaled_error_moment(inst: InstrumentPanel, u: np.ndarray, clusters: ClusterMap,
                        weights: HelmertWeights, partition: GroupPartition, group) -> np.ndarray:
    """``sqrt(n_K) * U_K`` built from the composite error ``u`` (periods 1..T)."""
    u = np.asarray(u, dtype=float)
    if u.shape[1] == weights.T + 1:
        u = u[:, 1:]
    u_H = helmert_cluster_transform(u, clusters, weights)
    rows = partition.members(group)
    Zd = cluster_demean(inst.Z, clusters)[rows]
    return np.einsum("ntz,nt->z", Zd, u_H[rows]) / math.sqrt(rows.size)


def martingale_gap(inst, u, epsilon, clusters, weights, partition, group) -> float:
    """Relative gap between the two representations of the scaled error moment."""
    lhs = scaled_error_moment(inst, u, clusters, weights, partition, group)
    rhs = martingale_form(inst, epsilon, clusters, weights, partition, group)
    denom = max(np.linalg.norm(rhs), np.linalg.norm(lhs), np.finfo(float).tiny)
    return float(np.linalg.norm(lhs - rhs) / denom)


def estimate(data: PanelDataset, nets: NetworkStack, option="B", alpha: float = 0.05,
             u: np.ndarray | None = None, epsilon: np.ndarray | None = None,
             validate: bool = True) -> EstimationResult:
    """Run the full pipeline for both groups.

    When the true composite error ``u`` and idiosyncratic shocks ``epsilon``
    are supplied (simulation mode) the martingale representation of the error
    moment is checked and its relative residual stored in the diagnostics.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    option = IvOption.parse(option)
    pipe = prepare(data, nets, option, validate=validate)
    groups = {}
    for g in GROUP_NAMES:
        groups[g] = estimate_group(pipe, data.clusters, data.partition, g, alpha)
        if u is not None and epsilon is not None:
            groups[g].diagnostics["martingale_gap"] = martingale_gap(
                pipe.inst, u, epsilon, data.clusters, pipe.weights, data.partition, g)
    return EstimationResult(groups=groups, option=option, alpha=alpha, T=data.T,
                            diagnostics={"d_W": pipe.regs.d_W, "d_Z": pipe.inst.d_Z})
