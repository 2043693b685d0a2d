"""CSV ingestion/export, percentile-threshold networks and result serialisation."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .panel import GROUP_NAMES, ClusterMap, GroupPartition, NetworkStack, PanelDataset, group_code

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"


class InputError(ValueError):
    """Malformed input file; message carries the path and line number when known."""


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- panel CSV

@dataclass
class IngestSummary:
    n_units_read: int
    n_units_dropped: int
    n_values_interpolated: int
    dropped_units: list


def _interpolate(series: np.ndarray, max_gap: int) -> tuple[np.ndarray | None, int]:
    """Fill interior NaN runs of length <= ``max_gap`` linearly; None if anything is left."""
    miss = np.isnan(series)
    if not miss.any():
        return series, 0
    if miss[0] or miss[-1]:
        return None, 0
    idx = np.flatnonzero(miss)
    runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
    if max(r.size for r in runs) > max_gap:
        return None, 0
    known = np.flatnonzero(~miss)
    out = series.copy()
    out[idx] = np.interp(idx, known, series[known])
    return out, idx.size


def load_panel(path, interpolate_max_gap: int = 3) -> tuple[PanelDataset, IngestSummary]:
    """Read a panel CSV (``unit,period,y,x1..xp,group,cluster``) into a balanced dataset.

    Periods are re-based to 0. Interior gaps up to ``interpolate_max_gap``
    periods are filled linearly per unit and variable; units still missing
    values (including any missing first or last period) are dropped.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        required = ["unit", "period", "y", "group", "cluster"]
        missing = [c for c in required if c not in header]
        if missing:
            raise InputError(f"{path}: header lacks columns {missing}")
        xcols = [h for h in header if h.startswith("x") and h[1:].isdigit()]
        xcols.sort(key=lambda h: int(h[1:]))
        if xcols and [int(h[1:]) for h in xcols] != list(range(1, len(xcols) + 1)):
            raise InputError(f"{path}: covariate columns must be x1..xp, got {xcols}")
        pos = {h: header.index(h) for h in required + xcols}
        units: dict[str, dict] = {}
        order: list[str] = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            uid = row[pos["unit"]].strip()
            if not uid:
                raise InputError(f"{path}:{line}: empty unit id")
            try:
                period = int(row[pos["period"]])
            except ValueError:
                raise InputError(f"{path}:{line}: period {row[pos['period']]!r} is not an integer") from None
            try:
                vals = [_parse_float(row[pos[c]]) for c in ["y"] + xcols]
            except ValueError as exc:
                raise InputError(f"{path}:{line}: {exc}") from None
            try:
                grp = group_code(row[pos["group"]].strip())
            except ValueError as exc:
                raise InputError(f"{path}:{line}: {exc}") from None
            clus = row[pos["cluster"]].strip()
            rec = units.get(uid)
            if rec is None:
                rec = units[uid] = {"group": grp, "cluster": clus, "obs": {}}
                order.append(uid)
            elif rec["group"] != grp or rec["cluster"] != clus:
                raise InputError(f"{path}:{line}: unit {uid!r} changes group or cluster")
            if period in rec["obs"]:
                raise InputError(f"{path}:{line}: duplicate row for unit {uid!r}, period {period}")
            rec["obs"][period] = vals
    if not units:
        raise InputError(f"{path}: no data rows")
    all_periods = [p for rec in units.values() for p in rec["obs"]]
    p0, p1 = min(all_periods), max(all_periods)
    n_per = p1 - p0 + 1
    k = 1 + len(xcols)
    keep_ids, ys, xs, groups, clusters, dropped = [], [], [], [], [], []
    n_filled = 0
    for uid in order:
        rec = units[uid]
        arr = np.full((n_per, k), np.nan)
        for period, vals in rec["obs"].items():
            arr[period - p0] = vals
        filled = 0
        ok = True
        for j in range(k):
            first = 0 if j == 0 else 1  # covariates start at the second period
            col, nf = _interpolate(arr[first:, j], interpolate_max_gap)
            if col is None:
                ok = False
                break
            arr[first:, j] = col
            filled += nf
        if not ok:
            dropped.append(uid)
            continue
        n_filled += filled
        keep_ids.append(uid)
        ys.append(arr[:, 0])
        xs.append(arr[1:, 1:])
        groups.append(rec["group"])
        clusters.append(rec["cluster"])
    if dropped:
        log.info("dropped %d of %d units that stay incomplete after interpolation",
                 len(dropped), len(order))
    if not keep_ids:
        raise InputError(f"{path}: no unit survives balancing (all {len(order)} dropped)")
    data = PanelDataset(y=np.array(ys), X=np.array(xs).reshape(len(keep_ids), n_per - 1, k - 1),
                        partition=GroupPartition(np.array(groups)),
                        clusters=ClusterMap(np.array(clusters, dtype=object).astype(str)),
                        unit_ids=tuple(keep_ids), period_labels=tuple(range(p0, p1 + 1)))
    return data, IngestSummary(len(order), len(dropped), n_filled, dropped)


def ingest_panel(path, interpolate_max_gap: int = 3) -> PanelDataset:
    return load_panel(path, interpolate_max_gap)[0]


def _parse_float(s: str) -> float:
    s = s.strip()
    if s == "" or s.lower() in ("na", "nan"):
        return math.nan
    try:
        return float(s)
    except ValueError:
        raise ValueError(f"cannot parse {s!r} as a number") from None


def write_panel_csv(data: PanelDataset, path, cluster_ids=None) -> None:
    ids = data.unit_ids or default_unit_ids(data)
    labels = data.period_labels or tuple(range(data.T + 1))
    cids = cluster_ids or [f"c{c}" for c in range(data.clusters.n_clusters)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "period", "y"] + [f"x{k}" for k in range(1, data.p + 1)]
                   + ["group", "cluster"])
        for i in range(data.n):
            g = GROUP_NAMES[data.partition.group_of[i]]
            c = cids[data.clusters.cluster_of[i]]
            for t in range(data.T + 1):
                # covariates start at period 1; period 0 carries blanks
                xs = [""] * data.p if t == 0 else [_fmt(x) for x in data.X[i, t - 1]]
                w.writerow([ids[i], labels[t], _fmt(data.y[i, t])] + xs + [g, c])


def default_unit_ids(data: PanelDataset) -> tuple:
    return tuple(f"{GROUP_NAMES[g]}{i}" for i, g in enumerate(data.partition.group_of))


# ---------------------------------------------------------------- edges CSV

def read_edges(path, data: PanelDataset) -> list[tuple]:
    """Edge rows ``layer,period,src,dst`` resolved to dense ids.

    ``period`` is the label of the lagged-outcome period the edge governs, or
    ``*`` for a static edge. Edges touching units absent from the panel are
    skipped and counted.
    """
    path = Path(path)
    ids = {u: i for i, u in enumerate(data.unit_ids or default_unit_ids(data))}
    labels = data.period_labels or tuple(range(data.T + 1))
    period_index = {lab: t for t, lab in enumerate(labels[:-1])}
    edges, skipped = [], 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if header[:4] != ["layer", "period", "src", "dst"]:
            raise InputError(f"{path}: header must be layer,period,src,dst")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 4:
                raise InputError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            try:
                layer = int(row[0])
            except ValueError:
                raise InputError(f"{path}:{line}: bad layer {row[0]!r}") from None
            if layer < 1:
                raise InputError(f"{path}:{line}: layers are numbered from 1")
            ptxt = row[1].strip()
            if ptxt == "*":
                period = None
            else:
                try:
                    period = period_index[int(ptxt)]
                except (ValueError, KeyError):
                    raise InputError(f"{path}:{line}: period {ptxt!r} is not a lagged-outcome "
                                     f"period of the panel") from None
            src, dst = row[2].strip(), row[3].strip()
            if src == dst:
                raise InputError(f"{path}:{line}: self-loop on unit {src!r}")
            if src not in ids or dst not in ids:
                skipped += 1
                continue
            edges.append((layer, period, ids[src], ids[dst]))
    if skipped:
        log.info("skipped %d edges touching units not in the panel", skipped)
    return edges


def build_stack(data: PanelDataset, edges: list[tuple], n_layers: int | None = None
                ) -> NetworkStack:
    if n_layers is None:
        n_layers = max((e[0] for e in edges), default=1)
    return NetworkStack.from_edges(data.n, data.T, n_layers, edges)


def ingest_edges(path, data: PanelDataset) -> NetworkStack:
    return build_stack(data, read_edges(path, data))


def write_edges_csv(nets: NetworkStack, path, data: PanelDataset) -> None:
    ids = data.unit_ids or default_unit_ids(data)
    labels = data.period_labels or tuple(range(data.T + 1))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "period", "src", "dst"])
        for layer, period, src, dst in nets.edges():
            w.writerow([layer, "*" if period is None else labels[period], ids[src], ids[dst]])


# ---------------------------------------------------------------- weighted bipartite

def read_weights(path) -> list[tuple[str, str, float]]:
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if header[:3] != ["src", "dst", "weight"]:
            raise InputError(f"{path}: header must be src,dst,weight")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise InputError(f"{path}:{line}: expected 3 fields")
            try:
                wt = float(row[2])
            except ValueError:
                raise InputError(f"{path}:{line}: bad weight {row[2]!r}") from None
            if not math.isfinite(wt) or wt < 0:
                raise InputError(f"{path}:{line}: weight must be finite and nonnegative")
            rows.append((row[0].strip(), row[1].strip(), wt))
    if not rows:
        raise InputError(f"{path}: no weight rows")
    return rows


def nearest_rank_percentile(values, q: float) -> float:
    """Nearest-rank percentile; ``-inf`` for ``q = 0`` so every value exceeds it."""
    if not 0 <= q < 100:
        raise ValueError(f"percentile must lie in [0, 100), got {q}")
    vals = np.sort(np.asarray(values, dtype=float))
    rank = math.ceil(q / 100.0 * vals.size)
    return -math.inf if rank == 0 else float(vals[rank - 1])


def build_threshold_network(weights, percentile: float) -> list[tuple[str, str]]:
    """Keep ``src -> dst`` pairs whose weight is strictly above the percentile of all listed weights."""
    if not weights:
        raise ValueError("no weights given")
    cut = nearest_rank_percentile([w for _, _, w in weights], percentile)
    return [(s, d) for s, d, w in weights if w > cut]


# ---------------------------------------------------------------- results

def _arr(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def group_to_dict(g) -> dict:
    from .inference import two_sided_pvalue
    se, ci, t = g.se, g.ci, g.t_stats
    coefs = []
    for j, (label, col) in enumerate(zip(g.coef_labels(), g.names)):
        tj = float(t[j])
        coefs.append({
            "name": label, "regressor": col, "estimate": float(g.delta_hat[j]),
            "initial": float(g.delta_tilde[j]), "se": float(se[j]),
            "t": None if math.isnan(tj) else tj,
            "p_value": None if math.isnan(tj) else two_sided_pvalue(tj),
            "ci_low": float(ci[j, 0]), "ci_high": float(ci[j, 1]),
        })
    return {"n": g.n_K, "coefficients": coefs, "V_hat": _arr(g.V_hat),
            "Omega_hat": _arr(g.Omega_hat), "diagnostics": _jsonable(g.diagnostics)}


def _jsonable(obj):
    """Plain JSON types with non-finite floats mapped to null."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def result_to_dict(res, decision=None, verdict: str | None = None, meta: dict | None = None,
                   warnings=()) -> dict:
    from . import __version__
    m = {"schema_version": SCHEMA_VERSION, "package_version": __version__,
         "iv_option": res.option.value, "alpha": res.alpha, "T": res.T,
         "n_B": res.n_B, "n_F": res.n_F}
    m.update(meta or {})
    sd = None
    if decision is not None:
        sd = decision.to_dict()
        sd["verdict"] = verdict
    diag = dict(res.diagnostics)
    diag["warnings"] = list(warnings)
    return {"meta": m, "groups": {k: group_to_dict(g) for k, g in res.groups.items()},
            "stepdown": sd, "diagnostics": _jsonable(diag)}


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8")


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, allow_nan=False)
