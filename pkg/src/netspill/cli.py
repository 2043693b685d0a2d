"""Command line entry point: ``netspill estimate | simulate | mc``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import EstimationError
from .estimator import estimate
from .inference import spillover_verdict, squared_t_stats, stepdown
from .instruments import IvOption
from .panel import GROUP_NAMES, ValidationError, validate_dataset
from .simulate import SimulationConfig, TrueParams, mc_study, simulate_panel

log = logging.getLogger("netspill")


def _emit_error(stage: str, message: str, out: str | None, code: int, **extra) -> int:
    doc = {"error": {"stage": stage, "message": message, **extra}}
    text = io.dumps(doc)
    print(text)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    return code


# ---------------------------------------------------------------- estimate

def _add_threshold_edges(args, data, edges):
    ids = {u: i for i, u in enumerate(data.unit_ids or io.default_unit_ids(data))}
    layer = args.weights_layer or 1
    added = skipped = 0
    for path, src_group, dst_group in ((args.weights_sb, 1, 0), (args.weights_bs, 0, 1)):
        if not path:
            continue
        for src, dst in io.build_threshold_network(io.read_weights(path), args.percentile):
            if src not in ids or dst not in ids:
                skipped += 1
                continue
            s, d = ids[src], ids[dst]
            if data.partition.group_of[s] != src_group or data.partition.group_of[d] != dst_group:
                raise io.InputError(f"{path}: pair {src!r}->{dst!r} does not run "
                                    f"{GROUP_NAMES[src_group]}->{GROUP_NAMES[dst_group]}")
            edges.append((layer, None, s, d))
            added += 1
    if skipped:
        log.info("skipped %d weighted pairs touching units not in the panel", skipped)
    return added


def _summary_table(res, decision, verdict) -> str:
    lines = []
    for k, g in res.groups.items():
        lines.append(f"group {k} (n={g.n_K})")
        lines.append(f"  {'parameter':<16}{'estimate':>12}{'se':>11}{'ci_low':>11}"
                     f"{'ci_high':>11}{'p':>9}")
        d = io.group_to_dict(g)
        for c in d["coefficients"]:
            p = "nan" if c["p_value"] is None else f"{c['p_value']:.4f}"
            lines.append(f"  {c['name']:<16}{c['estimate']:>12.5f}{c['se']:>11.5f}"
                         f"{c['ci_low']:>11.5f}{c['ci_high']:>11.5f}{p:>9}")
    if decision is not None:
        lines.append(f"step-down (alpha={decision.alpha:g}): Q_FB={decision.Q_FB:.4f} "
                     f"Q_BF={decision.Q_BF:.4f} S_hat={sorted(decision.S_hat)}")
        lines.append(f"spillover direction: {verdict}")
    else:
        lines.append("step-down: not available (degenerate variance)")
    return "\n".join(lines)


def cmd_estimate(args) -> int:
    try:
        data, summary = io.load_panel(args.panel, args.max_gap)
        edges = io.read_edges(args.edges, data) if args.edges else []
        if args.weights_sb or args.weights_bs:
            _add_threshold_edges(args, data, edges)
        if not args.edges and not (args.weights_sb or args.weights_bs):
            return _emit_error("input", "need --edges or --weights-sb/--weights-bs", args.out, 2)
        nets = io.build_stack(data, edges)
    except (io.InputError, OSError, ValueError) as exc:
        return _emit_error("ingest", str(exc), args.out, 1)
    report = validate_dataset(data, nets)
    errors = [v for v in report if v.severity == "error"]
    if errors:
        return _emit_error("validate", str(ValidationError(errors)), args.out, 1,
                           violations=[v.kind for v in errors])
    warnings = [v.message for v in report]
    try:
        res = estimate(data, nets, args.iv, args.alpha, validate=False)
    except EstimationError as exc:
        return _emit_error(exc.stage, str(exc), args.out, 1, **{k: v for k, v in
                           exc.to_dict().items() if k not in ("stage", "message")})
    decision = verdict = None
    try:
        q_fb, q_bf = squared_t_stats(res, args.layer)
        decision = stepdown(q_fb, q_bf, args.alpha)
        verdict = spillover_verdict(q_fb, q_bf, names=(args.name_b, args.name_f))
    except ValueError as exc:
        warnings.append(f"step-down skipped: {exc}")
    meta = {"L": nets.L, "p": data.p, "layer_tested": args.layer,
            "units_read": summary.n_units_read, "units_dropped": summary.n_units_dropped,
            "values_interpolated": summary.n_values_interpolated,
            "periods": [data.period_labels[0], data.period_labels[-1]]}
    doc = io.result_to_dict(res, decision, verdict, meta, warnings)
    if args.out:
        io.write_json(doc, args.out)
    print(_summary_table(res, decision, verdict))
    return 0


# ---------------------------------------------------------------- simulate

def _parse_params(text: str) -> TrueParams:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) == 1:
        return TrueParams.uniform(vals[0])
    return TrueParams.from_any(vals)


def cmd_simulate(args) -> int:
    try:
        cfg = SimulationConfig(n_per_group=args.n, T=args.T, p=args.p,
                               clusters_total=args.clusters, ba_m=args.ba_m,
                               true_params=_parse_params(args.params), seed=args.seed,
                               noise=not args.no_noise)
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    draw = simulate_panel(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_panel_csv(draw.data, out / "panel.csv")
    io.write_edges_csv(draw.nets, out / "edges.csv", draw.data)
    ids = io.default_unit_ids(draw.data)
    truth = {"config": cfg.to_dict(),
             "delta": {g: cfg.true_params.delta(g, cfg.p).tolist() for g in GROUP_NAMES}}
    if args.include_errors:
        truth["components"] = {
            "unit_ids": list(ids), "v": draw.v.tolist(), "pi": draw.pi.tolist(),
            "epsilon": draw.epsilon.tolist()}
    io.write_json(truth, out / "truth.json")
    deg = draw.nets.in_degrees()
    print(f"wrote {out}/panel.csv, edges.csv, truth.json "
          f"(average union in-degree {deg.mean():.2f})")
    return 0


# ---------------------------------------------------------------- mc

_CELL_KEYS = {"n", "T", "p", "ba_m", "clusters", "iv", "params", "seed", "null_value",
              "delta", "noise", "label"}


def _load_grid(path) -> list[dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(doc, list):
        defaults, cells = {}, doc
    else:
        defaults, cells = doc.get("defaults", {}), doc.get("cells", [])
    out = []
    for i, cell in enumerate(cells):
        merged = {**defaults, **cell}
        unknown = set(merged) - _CELL_KEYS
        if unknown:
            raise ValueError(f"cell {i}: unknown keys {sorted(unknown)}")
        out.append(merged)
    return out


def _cell_config(cell: dict, index: int, base_seed: int) -> SimulationConfig:
    params = cell.get("params", 0.0)
    if isinstance(params, (int, float)):
        params = TrueParams.uniform(float(params))
    seed = cell.get("seed")
    if seed is None:
        seed = int(np.random.SeedSequence(base_seed, spawn_key=(2, index)).generate_state(1)[0])
    return SimulationConfig(n_per_group=cell.get("n", 500), T=cell.get("T", 5),
                            p=cell.get("p", 3), clusters_total=cell.get("clusters", 10),
                            ba_m=cell.get("ba_m", 1), true_params=params,
                            iv_option=cell.get("iv", "A"), seed=seed,
                            noise=cell.get("noise", True))


def _panel_label(tp: dict) -> str:
    keys = ("alpha_B", "alpha_F", "beta_BB", "beta_BF", "beta_FB", "beta_FF")
    return " ".join(f"{k}={tp[k]:g}" for k in keys)


def _write_table(rows: list[dict], value: str, path: Path) -> None:
    """Grid table: rows (panel, n, Z), columns (BA m, T)."""
    cols = sorted({(r["ba_m"], r["T"]) for r in rows})
    keys = []
    table: dict = {}
    for r in rows:
        key = (r["panel"], r["n"], r["iv"])
        if key not in table:
            table[key] = {}
            keys.append(key)
        table[key][(r["ba_m"], r["T"])] = r[value]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["panel", "n", "Z"] + [f"BA{m} T={t}" for m, t in cols])
        for key in keys:
            vals = table[key]
            w.writerow(list(key) + ["" if c not in vals or vals[c] is None
                                    else f"{vals[c]:.3f}" for c in cols])


def cmd_mc(args) -> int:
    try:
        cells = _load_grid(args.grid)
    except (OSError, ValueError) as exc:
        print(f"cannot read grid: {exc}", file=sys.stderr)
        return 2
    if not cells:
        print("grid has no cells", file=sys.stderr)
        return 2
    results, rows = [], []
    for i, cell in enumerate(cells):
        try:
            cfg = _cell_config(cell, i, args.seed)
            rep = mc_study(cfg, args.reps, args.alpha, cell.get("null_value"),
                           float(cell.get("delta", 0.0)), jobs=args.jobs)
        except (ValueError, EstimationError) as exc:
            results.append({"cell": i, "settings": cell, "error": str(exc)})
            continue
        d = rep.to_dict()
        results.append({"cell": i, "settings": cell, "report": d})
        rows.append({"panel": _panel_label(d["config"]["true_params"]),
                     "n": cfg.n_per_group, "iv": cfg.iv_option.value, "ba_m": cfg.ba_m,
                     "T": cfg.T, "delta": rep.delta_shift,
                     "rejection": None if math.isnan(rep.rejection_rate) else rep.rejection_rate,
                     "fwer": None if math.isnan(rep.fwer) else rep.fwer})
        log.info("cell %d: rejection %.3f fwer %.3f", i, rep.rejection_rate, rep.fwer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json({"schema_version": io.SCHEMA_VERSION, "reps": args.reps, "alpha": args.alpha,
                   "cells": results}, out / "mc_report.json")
    _write_table([r for r in rows if r["delta"] == 0], "rejection", out / "size_table.csv")
    _write_table([r for r in rows if r["delta"] != 0], "rejection", out / "power_table.csv")
    _write_table(rows, "fwer", out / "fwer_table.csv")
    if not rows:
        print("every cell failed", file=sys.stderr)
        return 1
    print(f"wrote {out}/mc_report.json and table CSVs ({len(rows)}/{len(cells)} cells ok)")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netspill", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="estimate spillovers from panel and network files")
    e.add_argument("--panel", required=True)
    e.add_argument("--edges")
    e.add_argument("--weights-sb", help="weights CSV for F->B links (src=F unit, dst=B unit)")
    e.add_argument("--weights-bs", help="weights CSV for B->F links (src=B unit, dst=F unit)")
    e.add_argument("--percentile", type=float, default=25.0)
    e.add_argument("--weights-layer", type=int, default=None,
                   help="layer receiving threshold edges (default: 1, merged with the edge file)")
    e.add_argument("--iv", default="B", type=IvOption.parse,
                   help="instrument option: simple, A, B or C")
    e.add_argument("--alpha", type=float, default=0.05)
    e.add_argument("--layer", type=int, default=1, help="layer whose cross-group betas are tested")
    e.add_argument("--max-gap", type=int, default=3)
    e.add_argument("--name-b", default="B")
    e.add_argument("--name-f", default="F")
    e.add_argument("--out")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="write one simulated panel plus ground truth")
    s.add_argument("--n", type=int, default=500, help="units per group")
    s.add_argument("--T", type=int, default=5)
    s.add_argument("--p", type=int, default=3)
    s.add_argument("--ba-m", type=int, default=1)
    s.add_argument("--clusters", type=int, default=10)
    s.add_argument("--params", default="0",
                   help="one value for all alphas/betas, or 8 values "
                        "alpha_B,alpha_F,beta_BB,beta_BF,beta_FB,beta_FF,gamma_B,gamma_F")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-noise", action="store_true", help="set idiosyncratic shocks to zero")
    s.add_argument("--include-errors", action="store_true",
                   help="store v, pi and epsilon in truth.json")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("mc", help="Monte Carlo size/power/FWER tables over a design grid")
    m.add_argument("--reps", type=int, default=500)
    m.add_argument("--grid", required=True, help="JSON list of cells or {defaults, cells}")
    m.add_argument("--alpha", type=float, default=0.05)
    m.add_argument("--jobs", type=int, default=1)
    m.add_argument("--seed", type=int, default=0, help="root seed for cells without one")
    m.add_argument("--out", required=True, help="output directory")
    m.set_defaults(func=cmd_mc)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "reps", 1) < 1:
        print("--reps must be positive", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
