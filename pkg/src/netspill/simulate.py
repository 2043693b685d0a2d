"""Barabasi-Albert network stacks, the bank/firm data generating process and Monte Carlo studies."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import EstimationError
from .estimator import estimate
from .inference import normal_ppf, squared_t_stats, stepdown
from .instruments import IvOption
from .panel import GROUP_B, GROUP_F, ClusterMap, GroupPartition, NetworkStack, PanelDataset
from .transforms import _row_mean_operator, cluster_demean

log = logging.getLogger(__name__)

# stream keys for rng_stream
_NETWORK_STREAM = 0
_REPLICATION_STREAM = 1


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the substream ``key`` of ``seed``.

    Each key yields an independent stream, so a replication can be re-run in
    isolation and results do not depend on scheduling.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def generate_ba_graph(n_nodes: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Undirected preferential-attachment graph as an ``(E, 2)`` edge array.

    Starts from a clique on ``m + 1`` nodes; every later node links to ``m``
    distinct existing nodes drawn with probability proportional to degree.
    """
    if m < 1 or n_nodes <= m:
        raise ValueError(f"need n_nodes > m >= 1, got n_nodes={n_nodes}, m={m}")
    n_edges = m * (m + 1) // 2 + m * (n_nodes - m - 1)
    edges = np.empty((n_edges, 2), dtype=np.int64)
    # every endpoint appended once per incident edge: uniform draws from it are degree-weighted
    ends = np.empty(2 * n_edges, dtype=np.int64)
    k = 0
    for a in range(m + 1):
        for b in range(a + 1, m + 1):
            edges[k] = (a, b)
            ends[2 * k], ends[2 * k + 1] = a, b
            k += 1
    for new in range(m + 1, n_nodes):
        n_ends = 2 * k
        targets: list[int] = []
        while len(targets) < m:
            cand = int(ends[rng.integers(n_ends)])
            if cand not in targets:
                targets.append(cand)
        for tgt in targets:
            edges[k] = (tgt, new)
            ends[2 * k], ends[2 * k + 1] = tgt, new
            k += 1
    return edges


def _block(edges: np.ndarray, src_offset: int, dst_offset: int, n_total: int) -> sp.csr_matrix:
    """In-link matrix where each undirected edge {a, b} links both ways across the block."""
    a, b = edges[:, 0], edges[:, 1]
    rows = np.concatenate([b + dst_offset, a + dst_offset])
    cols = np.concatenate([a + src_offset, b + src_offset])
    return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n_total, n_total))


def assemble_network_stack(n_per_group: int, ba_m: int, rng: np.random.Generator,
                           n_periods: int = 1) -> NetworkStack:
    """Static one-layer stack from four BA graphs (bank->bank, firm->bank, bank->firm, firm->firm).

    Banks are units ``0..n-1`` and firms ``n..2n-1``. Every graph lives on
    ``n`` nodes; node ``a`` stands for unit ``a`` of the source group and unit
    ``a`` of the target group, and each edge is an in-link in both directions.
    """
    n = n_per_group
    total = 2 * n
    offsets = {GROUP_B: 0, GROUP_F: n}
    adj = None
    for src, dst in ((GROUP_B, GROUP_B), (GROUP_F, GROUP_B), (GROUP_B, GROUP_F),
                     (GROUP_F, GROUP_F)):
        block = _block(generate_ba_graph(n, ba_m, rng), offsets[src], offsets[dst], total)
        adj = block if adj is None else adj + block
    return NetworkStack([adj], n_periods=n_periods, static=True)


@dataclass(frozen=True)
class TrueParams:
    alpha_B: float = 0.0
    alpha_F: float = 0.0
    beta_BB: float = 0.0
    beta_BF: float = 0.0
    beta_FB: float = 0.0
    beta_FF: float = 0.0
    gamma_B: float = 1.0
    gamma_F: float = 1.0

    @classmethod
    def from_any(cls, value) -> "TrueParams":
        if isinstance(value, cls):
            return value
        if isinstance(value, dict):
            return cls(**{k: float(v) for k, v in value.items()})
        if np.isscalar(value):
            return cls.uniform(float(value))
        vals = [float(v) for v in value]
        if len(vals) != 8:
            raise ValueError("expected 8 values: alpha_B alpha_F beta_BB beta_BF beta_FB "
                             "beta_FF gamma_B gamma_F")
        return cls(*vals)

    @classmethod
    def uniform(cls, value: float, gamma: float = 1.0) -> "TrueParams":
        return cls(value, value, value, value, value, value, gamma, gamma)

    def delta(self, group, p: int) -> np.ndarray:
        """Coefficients in regressor order (lag, bank-source, firm-source, covariates)."""
        if group in (GROUP_B, "B"):
            head = [self.alpha_B, self.beta_BB, self.beta_FB]
            gamma = self.gamma_B
        else:
            head = [self.alpha_F, self.beta_BF, self.beta_FF]
            gamma = self.gamma_F
        return np.array(head + [gamma] * p)


@dataclass(frozen=True)
class SimulationConfig:
    n_per_group: int = 500
    T: int = 5
    p: int = 3
    clusters_total: int = 10
    ba_m: int = 1
    true_params: TrueParams = field(default_factory=TrueParams)
    iv_option: IvOption = IvOption.PROJ_A
    seed: int = 0
    noise: bool = True

    def __post_init__(self):
        object.__setattr__(self, "true_params", TrueParams.from_any(self.true_params))
        object.__setattr__(self, "iv_option", IvOption.parse(self.iv_option))
        if self.clusters_total < 2 or self.clusters_total % 2:
            raise ValueError("clusters_total must be a positive even number")
        per_group = self.clusters_total // 2
        if self.n_per_group % per_group:
            raise ValueError(f"n_per_group={self.n_per_group} not divisible by the "
                             f"{per_group} clusters per group")
        if self.T < 2:
            raise ValueError("T must be at least 2")
        if self.p < 0:
            raise ValueError("p must be nonnegative")
        if self.ba_m < 1:
            raise ValueError("ba_m must be at least 1")
        if self.n_per_group <= self.ba_m:
            raise ValueError("n_per_group must exceed ba_m")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iv_option"] = self.iv_option.value
        return d


@dataclass(frozen=True)
class DgpDraw:
    """Simulated panel with its generative components.

    ``epsilon`` has shape ``(n, T+1)``; column 0 is the shock in the initial
    condition ``y_0 = v + epsilon_0``. ``pi`` has shape ``(T, clusters)`` for
    periods 1..T.
    """

    data: PanelDataset
    nets: NetworkStack
    epsilon: np.ndarray
    v: np.ndarray
    pi: np.ndarray
    params: TrueParams

    @property
    def u(self) -> np.ndarray:
        """Composite errors ``v_i + pi_{t,c(i)} + eps_it`` for periods 1..T."""
        c = self.data.clusters.cluster_of
        return self.v[:, None] + self.pi[:, c].T + self.epsilon[:, 1:]


def _design(config: SimulationConfig):
    n = config.n_per_group
    per_group = config.clusters_total // 2
    size = n // per_group
    group = np.repeat([GROUP_B, GROUP_F], n)
    cluster = np.arange(2 * n) // size
    return GroupPartition(group), ClusterMap(cluster)


def simulate_panel(config: SimulationConfig, nets: NetworkStack | None = None,
                   rng: np.random.Generator | None = None) -> DgpDraw:
    """Draw one panel from the bank/firm dynamic spillover model.

    Without ``rng`` the draw uses ``config.seed`` (network first, then data);
    a supplied ``nets`` is reused as is. Draw order: X, v, pi, epsilon.
    """
    if rng is None:
        rng = rng_stream(config.seed, _REPLICATION_STREAM, 0)
    if nets is None:
        nets = assemble_network_stack(config.n_per_group, config.ba_m,
                                      rng_stream(config.seed, _NETWORK_STREAM), config.T)
    partition, clusters = _design(config)
    n, T, p = 2 * config.n_per_group, config.T, config.p
    X = rng.normal(1.0, 1.0, size=(n, T, p))
    v = rng.normal(1.0, 1.0, size=n)
    pi = rng.normal(1.0, 1.0, size=(T, clusters.n_clusters))
    eps = rng.normal(0.0, 1.0, size=(n, T + 1))
    if not config.noise:
        eps[:] = 0.0
    y = _forward(config.true_params, X, v, pi, eps, partition, clusters, nets)
    data = PanelDataset(y=y, X=X, partition=partition, clusters=clusters)
    return DgpDraw(data=data, nets=nets, epsilon=eps, v=v, pi=pi, params=config.true_params)


def _forward(params: TrueParams, X, v, pi, eps, partition, clusters, nets) -> np.ndarray:
    n, T, p = X.shape
    is_b = partition.group_of == GROUP_B
    d_b, d_f = params.delta(GROUP_B, p), params.delta(GROUP_F, p)
    coef = np.where(is_b[:, None], d_b[None, :], d_f[None, :])
    y = np.empty((n, T + 1))
    y[:, 0] = v + eps[:, 0]
    c = clusters.cluster_of
    for t in range(1, T + 1):
        ops = [_row_mean_operator(nets.block(t - 1, 1, partition, src))
               for src in (GROUP_B, GROUP_F)]
        d = cluster_demean(y[:, t - 1], clusters)
        w = np.column_stack([y[:, t - 1], ops[0] @ d, ops[1] @ d, X[:, t - 1]])
        y[:, t] = np.einsum("nk,nk->n", w, coef) + v + pi[t - 1, c] + eps[:, t]
    return y


def true_delta(config: SimulationConfig) -> dict:
    return {"B": config.true_params.delta(GROUP_B, config.p),
            "F": config.true_params.delta(GROUP_F, config.p)}


@dataclass
class McReport:
    config: dict
    reps: int
    alpha: float
    null_value: float
    delta_shift: float
    n_ok: int
    n_failed: int
    failures: dict
    rejection_rate: float
    rejection_by_level: dict
    fwer: float
    S_P: list
    beta_FB_mean: float
    beta_FB_sd: float
    beta_BF_mean: float
    beta_BF_sd: float

    def to_dict(self) -> dict:
        return asdict(self)


def _replicate(args):
    config, nets, rep, null_value, levels, alpha = args
    rng = rng_stream(config.seed, _REPLICATION_STREAM, rep)
    draw = simulate_panel(config, nets=nets, rng=rng)
    try:
        res = estimate(draw.data, draw.nets, config.iv_option, alpha, validate=False)
        gb, gf = res.groups["B"], res.groups["F"]
        i_fb, i_bf = gb.source_index("F"), gf.source_index("B")
        se_fb = float(gb.se[i_fb])
        if not se_fb > 0:
            raise EstimationError("zero standard error for beta_FB", stage="inference", group="B")
        t_fb = (gb.delta_hat[i_fb] - null_value) / se_fb
        q_fb, q_bf = squared_t_stats(res)
        s_hat = stepdown(q_fb, q_bf, alpha).S_hat
    except (EstimationError, ValueError, np.linalg.LinAlgError) as exc:
        stage = getattr(exc, "stage", type(exc).__name__)
        return {"ok": False, "stage": stage}
    z = {lvl: normal_ppf(1.0 - lvl / 2.0) for lvl in levels}
    return {"ok": True, "beta_FB": float(gb.delta_hat[i_fb]), "beta_BF": float(gf.delta_hat[i_bf]),
            "reject": {lvl: bool(abs(t_fb) > z[lvl]) for lvl in levels},
            "S_hat": sorted(s_hat)}


def run_replications(config, nets, reps, null_value, levels, alpha, jobs=1) -> list:
    tasks = [(config, nets, r, null_value, levels, alpha) for r in range(reps)]
    if jobs <= 1:
        return [_replicate(t) for t in tasks]
    chunk = max(1, reps // (4 * jobs))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_replicate, tasks, chunksize=chunk))


def mc_study(config: SimulationConfig, reps: int, alpha: float = 0.05,
             null_value: float | None = None, delta_shift: float = 0.0, jobs: int = 1,
             levels=(0.01, 0.05, 0.10)) -> McReport:
    """Monte Carlo size/power/FWER study for one design cell.

    Data are generated with ``beta_FB`` shifted by ``delta_shift``; the t
    test is of ``beta_FB = null_value`` (default: the unshifted configured
    value). Networks are drawn once per cell and held fixed across
    replications; replication ``r`` uses its own substream of ``config.seed``.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    base = config.true_params
    if null_value is None:
        null_value = base.beta_FB
    params = replace(base, beta_FB=base.beta_FB + delta_shift)
    cfg = replace(config, true_params=params)
    nets = assemble_network_stack(cfg.n_per_group, cfg.ba_m,
                                  rng_stream(cfg.seed, _NETWORK_STREAM), cfg.T)
    levels = tuple(sorted(set(levels) | {alpha}))
    results = run_replications(cfg, nets, reps, null_value, levels, alpha, jobs)

    s_p = {j for j, val in (("FB", params.beta_FB), ("BF", params.beta_BF)) if val == 0.0}
    ok = [r for r in results if r["ok"]]
    failures: dict = {}
    for r in results:
        if not r["ok"]:
            failures[r["stage"]] = failures.get(r["stage"], 0) + 1
    if failures:
        log.warning("%d of %d replications failed: %s", reps - len(ok), reps, failures)
    n_ok = len(ok)

    def rate(flags):
        flags = list(flags)
        return float(sum(flags) / len(flags)) if flags else math.nan

    b_fb = np.array([r["beta_FB"] for r in ok])
    b_bf = np.array([r["beta_BF"] for r in ok])
    return McReport(
        config=cfg.to_dict(), reps=reps, alpha=alpha, null_value=float(null_value),
        delta_shift=float(delta_shift), n_ok=n_ok, n_failed=reps - n_ok, failures=failures,
        rejection_rate=rate(r["reject"][alpha] for r in ok),
        rejection_by_level={f"{lvl:g}": rate(r["reject"][lvl] for r in ok) for lvl in levels},
        fwer=rate(not s_p <= set(r["S_hat"]) for r in ok),
        S_P=sorted(s_p),
        beta_FB_mean=float(b_fb.mean()) if n_ok else math.nan,
        beta_FB_sd=float(b_fb.std(ddof=1)) if n_ok > 1 else math.nan,
        beta_BF_mean=float(b_bf.mean()) if n_ok else math.nan,
        beta_BF_sd=float(b_bf.std(ddof=1)) if n_ok > 1 else math.nan,
    )


def fwer_experiment(config: SimulationConfig, reps: int, alpha: float = 0.05, jobs: int = 1
                    ) -> float:
    """Share of replications whose retained set misses a true null."""
    return mc_study(config, reps, alpha, jobs=jobs).fwer
