"""Experiment orchestration: flat key-value configs, a replica farm over a
bounded process pool, run manifests, and plot-ready CSV output.

Every run writes one directory: manifest.json (config echo, versions,
per-replica stream roots, truncation diagnostics, wall time) plus the
experiment's CSV tables and optional SVG polyline plots.  With a fixed seed
the CSV bytes are reproducible; wall-time lives only in the manifest.
"""
from __future__ import annotations

import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__, coupling, engine, infection, kernel, renorm, stats
from .lattice import JumpDistribution, drift, validate

ENV_OUT_ROOT = "DRIFTLAB_OUT"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config file: flat key = value lines, typed per experiment kind


_COMMON_SCHEMA = {
    "kind": str,
    "d": int,
    "p_pos": "floats",
    "p_neg": "floats",
    "seed": int,
    "replicas": int,
    "workers": int,
    "heavy": bool,
    "label": str,
}

_KIND_SCHEMA = {
    "front-sweep": {"rho_grid": "floats", "t_end": float, "front_dt": float,
                    "target_error": float, "speed_threshold": float,
                    "right_reach": float},
    "gip-stats": {"rho_grid": "floats", "t_end": float, "half_width": int},
    "couple": {"coupling_kind": str, "rho_low": float, "rho_high": float,
               "rho": float, "t_end": float, "t_grid": "floats",
               "half_width": int, "target_lo": int, "target_hi": int,
               "meeting_window_c": float},
    "decouple": {"rho": float, "gap": float, "box_side": int, "threshold": int,
                 "error_c": float},
    "renorm": {"estimate": str, "L_grid": "floats", "L0": int, "k": int,
               "k_max": int, "rho": float},
    "stats": {"report": str, "t": float, "t_grid": "floats", "rho": float,
              "a_max": int, "eps": float, "u_grid": "floats", "horizon": float,
              "separation": int, "mc_replicas": int},
}


def _parse_value(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ == "floats":
            return tuple(float(x) for x in raw.split(",") if x.strip() != "")
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from exc


def parse_config(path) -> dict:
    """Parse the flat config format; unknown keys are hard errors."""
    text = Path(path).read_text()
    raw: Dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value'")
        key, val = line.split("=", 1)
        key = key.strip()
        if key in raw:
            raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
        raw[key] = val
    if "kind" not in raw:
        raise ConfigError("config must set 'kind'")
    kind = raw["kind"].strip()
    if kind not in _KIND_SCHEMA:
        raise ConfigError(f"unknown experiment kind {kind!r}; "
                          f"choose from {sorted(_KIND_SCHEMA)}")
    schema = dict(_COMMON_SCHEMA)
    schema.update(_KIND_SCHEMA[kind])
    cfg: Dict[str, object] = {}
    for key, val in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} for kind {kind!r}")
        cfg[key] = _parse_value(key, val, schema[key])
    cfg.setdefault("d", 1)
    cfg.setdefault("p_pos", (0.25,))
    cfg.setdefault("p_neg", (0.75,))
    cfg.setdefault("seed", 1)
    cfg.setdefault("replicas", 100)
    cfg.setdefault("workers", 0)
    cfg.setdefault("heavy", False)
    if len(cfg["p_pos"]) != cfg["d"] or len(cfg["p_neg"]) != cfg["d"]:
        raise ConfigError("p_pos/p_neg length must equal d")
    return cfg


def jump_distribution(cfg: dict) -> JumpDistribution:
    rep = validate(cfg["p_pos"], cfg["p_neg"])
    p = JumpDistribution(tuple(cfg["p_pos"]), tuple(cfg["p_neg"]))
    if rep.zero_drift:
        sys.stderr.write("warning: zero-drift law; front regimes unavailable\n")
    return p


# ---------------------------------------------------------------------------
# output helpers


def fmt(x) -> str:
    """CSV cell formatting: numbers carry 9 significant digits, '.' decimal."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    return f"{float(x):.9g}"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def write_svg_polylines(path, series: Dict[str, List[Tuple[float, float]]],
                        title: str = "", width: int = 640, height: int = 420) -> None:
    """Minimal polyline plot (axes box, one polyline per labeled series)."""
    pts = [pt for s in series.values() for pt in s]
    if not pts:
        xs0, xs1, ys0, ys1 = 0.0, 1.0, 0.0, 1.0
    else:
        xs0 = min(p[0] for p in pts)
        xs1 = max(p[0] for p in pts)
        ys0 = min(p[1] for p in pts)
        ys1 = max(p[1] for p in pts)
        if xs0 == xs1:
            xs1 = xs0 + 1.0
        if ys0 == ys1:
            ys1 = ys0 + 1.0
    m = 50

    def sx(x):
        return m + (x - xs0) / (xs1 - xs0) * (width - 2 * m)

    def sy(y):
        return height - m - (y - ys0) / (ys1 - ys0) * (height - 2 * m)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect x="{m}" y="{m}" width="{width-2*m}" height="{height-2*m}" '
           'fill="none" stroke="black"/>']
    if title:
        out.append(f'<text x="{width/2}" y="{m-14}" text-anchor="middle" '
                   f'font-size="14">{title}</text>')
    out.append(f'<text x="{m}" y="{height-m+24}" font-size="11">{fmt(xs0)}</text>')
    out.append(f'<text x="{width-m}" y="{height-m+24}" text-anchor="end" '
               f'font-size="11">{fmt(xs1)}</text>')
    out.append(f'<text x="{m-4}" y="{height-m}" text-anchor="end" font-size="11">{fmt(ys0)}</text>')
    out.append(f'<text x="{m-4}" y="{m+6}" text-anchor="end" font-size="11">{fmt(ys1)}</text>')
    for i, (label, s) in enumerate(series.items()):
        col = colors[i % len(colors)]
        path_d = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
        out.append(f'<polyline points="{path_d}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        out.append(f'<text x="{width-m+4}" y="{m+14+16*i}" font-size="11" '
                   f'fill="{col}">{label}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out))


@dataclass
class RunDir:
    path: Path
    t_start: float = field(default_factory=time.time)
    manifest: dict = field(default_factory=dict)

    def finalize(self, cfg: dict, extra: dict):
        self.manifest.update({
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()},
            "version": __version__,
            "backend": kernel.BACKEND_NAME,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "wall_time_s": round(time.time() - self.t_start, 3),
        })
        self.manifest.update(extra)
        with open(self.path / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def make_run_dir(out: Optional[str], label: str) -> RunDir:
    root = Path(out) if out else Path(os.environ.get(ENV_OUT_ROOT, "runs"))
    path = root / label
    path.mkdir(parents=True, exist_ok=True)
    return RunDir(path=path)


def replica_seed_roots(seed: int, replicas: int, limit: int = 10000) -> List[str]:
    from .rng import derive
    n = min(replicas, limit)
    return [f"{derive(seed, (rep,)):016x}" for rep in range(n)]


# ---------------------------------------------------------------------------
# replica farm


def _pool_map(fn: Callable[[int], dict], replicas: int, workers: int) -> List[dict]:
    """Map fn over replica indices; deterministic order regardless of pool."""
    if workers <= 0:
        workers = min(os.cpu_count() or 1, 8)
    if workers == 1 or replicas <= 1:
        return [fn(rep) for rep in range(replicas)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(replicas), chunksize=max(1, replicas // (workers * 8))))


# top-level workers (picklable)

def _front_worker(args):
    (p_pos, p_neg, rho, t_end, half, seed, rep, front_dt) = args
    p = JumpDistribution(p_pos, p_neg)
    out = engine.run_counts(p, rho, t_end, half, seed, rep,
                            extra_at=[0] * p.d, infect_site=[0] * p.d,
                            infect_time=0.0, front_dt=front_dt)
    return {
        "replica": rep,
        "final_r": out["final_r"],
        "samples": [(t, r) for t, r in out["front_samples"]],
        "range_sup": out["range_sup"],
        "n_frozen": out["n_frozen"],
        "n_frozen_infected": out["n_frozen_infected"],
        "n_events": out["n_events"],
    }


def _map_args(fn, arglist, workers):
    if workers <= 0:
        workers = min(os.cpu_count() or 1, 8)
    if workers == 1 or len(arglist) <= 1:
        return [fn(a) for a in arglist]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, arglist, chunksize=max(1, len(arglist) // (workers * 8))))


def front_sweep_replicas(p: JumpDistribution, rho: float, t_end: float,
                         seed: int, replicas: int, front_dt: float = 1.0,
                         right_reach: Optional[float] = None,
                         target_error: float = 1e-6, workers: int = 0) -> List[dict]:
    reach = right_reach if right_reach is not None else max(8.0, abs(drift(p).v[0]) * t_end + 4 * math.sqrt(t_end))
    half = engine.infection_window(rho, t_end, reach, target_error, p.d)
    args = [(p.prob_pos, p.prob_neg, rho, t_end, half, seed, rep, front_dt)
            for rep in range(replicas)]
    return _map_args(_front_worker, args, workers)


# ---------------------------------------------------------------------------
# experiment commands


def cmd_front_sweep(cfg: dict, out_dir: Optional[str], plot: bool = True) -> Path:
    """Front-speed curves over a density grid; flags the empirical regime
    change of the terminal slope across the grid."""
    p = jump_distribution(cfg)
    rhos = cfg["rho_grid"] if "rho_grid" in cfg else (0.05, 6.0)
    t_end = cfg.get("t_end", 200.0)
    front_dt = cfg.get("front_dt", 1.0)
    replicas = cfg["replicas"]
    seed = cfg["seed"]
    rd = make_run_dir(out_dir, cfg.get("label", "front_sweep"))
    rows = []
    summary = []
    series = {}
    frozen_inf_total = 0
    for rho in rhos:
        reps = front_sweep_replicas(
            p, rho, t_end, seed, replicas, front_dt,
            right_reach=cfg.get("right_reach"),
            target_error=cfg.get("target_error", 1e-6), workers=cfg["workers"])
        frozen_inf_total += sum(r["n_frozen_infected"] for r in reps)
        times = [t for t, _ in reps[0]["samples"]] if reps and reps[0]["samples"] else []
        pts = []
        for ti, t in enumerate(times):
            if t <= 0:
                continue
            vals = np.array([r["samples"][ti][1] for r in reps], dtype=float) / t
            mean = vals.mean()
            half_ci = 1.959963984540054 * vals.std(ddof=1) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
            rows.append((rho, t, mean, mean - half_ci, mean + half_ci, len(vals)))
            pts.append((t, mean))
        series[f"rho={fmt(rho)}"] = pts
        finals = np.array([r["final_r"] for r in reps], dtype=float) / t_end
        summary.append({"rho": rho, "mean_final_slope": float(finals.mean()),
                        "sd_final_slope": float(finals.std(ddof=1)) if len(finals) > 1 else 0.0})
        traces = [[(t, None if r == kernel.NO_FRONT else r) for t, r in rep["samples"]]
                  for rep in reps]
        infection.dump_front_trace_csv(
            rd.path / f"front_trace_rho{fmt(rho)}.csv", traces)
    write_csv(rd.path / "front_speed.csv",
              ["rho", "t", "mean_r_over_t", "ci_lo", "ci_hi", "replicas"], rows)
    if plot:
        write_svg_polylines(rd.path / "front_speed.svg", series,
                            title="mean r_t / t by density")
    slopes = [s["mean_final_slope"] for s in summary]
    sign_change = None
    for i in range(len(slopes) - 1):
        if slopes[i] < 0 <= slopes[i + 1]:
            sign_change = (rhos[i], rhos[i + 1])
    rd.finalize(cfg, {
        "rho_grid": list(rhos),
        "summary": summary,
        "slope_sign_change_between": list(sign_change) if sign_change else None,
        "frozen_infected_total": frozen_inf_total,
        "replica_seed_roots": replica_seed_roots(seed, replicas),
    })
    return rd.path


def _gip_worker(args):
    (p_pos, p_neg, rho, t_end, half, seed, rep) = args
    p = JumpDistribution(p_pos, p_neg)
    run = infection.run_tracked(p, rho, t_end, half, seed, rep)
    mj = infection.max_gip_jumps(run) if run.state.infected_sites else 0
    rng = infection.infected_range(run)
    return {"replica": rep, "max_jumps": mj, "range": rng if rng is not None else 0}


def cmd_gip_stats(cfg: dict, out_dir: Optional[str]) -> Path:
    """Quantiles of max GIP jumps / T and infected range / T per density."""
    p = jump_distribution(cfg)
    rhos = cfg["rho_grid"] if "rho_grid" in cfg else (0.05,)
    t_end = cfg.get("t_end", 100.0)
    replicas = cfg["replicas"]
    seed = cfg["seed"]
    half = cfg.get("half_width") or engine.infection_window(max(rhos), t_end, 8.0 + t_end / 4)
    rd = make_run_dir(out_dir, cfg.get("label", "gip_stats"))
    rows = []
    for rho in rhos:
        args = [(p.prob_pos, p.prob_neg, rho, t_end, half, seed, rep)
                for rep in range(replicas)]
        reps = _map_args(_gip_worker, args, cfg["workers"])
        jumps = np.array([r["max_jumps"] for r in reps], dtype=float) / t_end
        rng = np.array([r["range"] for r in reps], dtype=float) / t_end
        qs = (0.5, 0.9, 0.999)
        row = [rho, t_end, replicas]
        row += [float(np.quantile(jumps, q)) for q in qs] + [float(jumps.max())]
        row += [float(np.quantile(rng, q)) for q in qs] + [float(rng.max())]
        rows.append(row)
    write_csv(rd.path / "gip_stats.csv",
              ["rho", "T", "replicas",
               "jumps_per_T_q50", "jumps_per_T_q90", "jumps_per_T_q999", "jumps_per_T_max",
               "range_per_T_q50", "range_per_T_q90", "range_per_T_q999", "range_per_T_max"],
              rows)
    rd.finalize(cfg, {"replica_seed_roots": replica_seed_roots(seed, replicas)})
    return rd.path


def _monotone_worker(args):
    (p_pos, p_neg, rho_low, rho_high, t_end, half, seed, rep) = args
    p = JumpDistribution(p_pos, p_neg)
    out = coupling.run_monotone(p, rho_low, rho_high, t_end, half, seed, rep)
    return {"replica": rep, "viol_dom": out.viol_domination,
            "viol_inf": out.viol_infection}


def _sprinkled_worker(args):
    (p_pos, p_neg, rho, t_end, tlo, thi, seed, rep, c) = args
    p = JumpDistribution(p_pos, p_neg)
    out = coupling.run_sprinkled(p, rho, t_end, [tlo], [thi], seed, rep,
                                 meeting_window_c=c, collect_occ=True)
    mc = out.merged_counts
    s = out.schedule
    lo = s.halo_lo[0] - s.window_lo[0]
    hi = s.halo_hi[0] - s.window_lo[0]
    hist_eta = {}
    hist_star = {}
    for arr, hist in ((out.result["init_occ_eta"], hist_eta),
                      (out.result["init_occ_star"], hist_star)):
        vals, cnts = np.unique(np.asarray(arr)[lo:hi + 1], return_counts=True)
        for v, ccount in zip(vals, cnts):
            hist[int(v)] = hist.get(int(v), 0) + int(ccount)
    return {"replica": rep, "dominated": out.dominated_on_target,
            "failed_by_bad_event": out.failed_by_bad_event,
            "bad_B0": out.bad_B0, "bad_A": out.bad_A,
            "fail_sites": out.fail_sites,
            "merged_nondecreasing": bool(np.all(np.diff(mc) >= 0)),
            "final_merged": int(mc[-1]) if len(mc) else 0,
            "n_eta": out.n_eta, "demerges": out.demerges,
            "rho_star": s.rho_star,
            "hist_eta": hist_eta, "hist_star": hist_star}


def cmd_couple(cfg: dict, out_dir: Optional[str]) -> Path:
    p = jump_distribution(cfg)
    kind = cfg.get("coupling_kind", "monotone")
    seed = cfg["seed"]
    replicas = cfg["replicas"]
    rd = make_run_dir(out_dir, cfg.get("label", f"couple_{kind}"))
    if kind == "monotone":
        rho_low = cfg.get("rho_low", 0.5)
        rho_high = cfg.get("rho_high", 1.0)
        t_end = cfg.get("t_end", 50.0)
        half = cfg.get("half_width") or engine.infection_window(rho_high, t_end, 8.0)
        args = [(p.prob_pos, p.prob_neg, rho_low, rho_high, t_end, half, seed, rep)
                for rep in range(replicas)]
        reps = _map_args(_monotone_worker, args, cfg["workers"])
        write_csv(rd.path / "monotone.csv",
                  ["replica", "viol_domination", "viol_infection"],
                  [(r["replica"], r["viol_dom"], r["viol_inf"]) for r in reps])
        rd.finalize(cfg, {
            "total_violations": int(sum(r["viol_dom"] + r["viol_inf"] for r in reps)),
            "replica_seed_roots": replica_seed_roots(seed, replicas),
        })
        return rd.path
    if kind == "sprinkled":
        rho = cfg.get("rho", 1.0)
        t_grid = cfg["t_grid"] if "t_grid" in cfg else (cfg.get("t_end", 500.0),)
        tlo = cfg.get("target_lo", 1)
        thi = cfg.get("target_hi", 20)
        c = cfg.get("meeting_window_c", coupling.DEFAULT_MEETING_WINDOW_C)
        # one fully detailed coupling manifest (schedule, box geometry, bad
        # events, merged counts, outcome) for the first replica of each T
        details = {}
        for t_end in t_grid:
            out = coupling.run_sprinkled(p, rho, t_end, [tlo], [thi], seed, 0,
                                         meeting_window_c=c)
            details[fmt(t_end)] = out.manifest()
        with open(rd.path / "coupling_manifest.json", "w") as fh:
            json.dump(details, fh, indent=2, sort_keys=True)
            fh.write("\n")
        rows = []
        agg = []
        for t_end in t_grid:
            args = [(p.prob_pos, p.prob_neg, rho, t_end, tlo, thi, seed, rep, c)
                    for rep in range(replicas)]
            reps = _map_args(_sprinkled_worker, args, cfg["workers"])
            fails = sum(0 if r["dominated"] else 1 for r in reps)
            lo, hi = stats.wilson_ci(fails, replicas)
            rows += [(t_end, r["replica"], int(r["dominated"]),
                      int(r["failed_by_bad_event"]), int(r["bad_B0"]),
                      int(r["bad_A"]), r["fail_sites"], r["final_merged"],
                      int(r["merged_nondecreasing"])) for r in reps]
            agg.append({"t_end": t_end, "failures": fails, "replicas": replicas,
                        "freq": fails / replicas, "wilson": [lo, hi],
                        "merged_nondecreasing_all": all(r["merged_nondecreasing"] for r in reps),
                        "demerges": int(sum(r["demerges"] for r in reps))})
        write_csv(rd.path / "sprinkled.csv",
                  ["t_end", "replica", "dominated", "failed_by_bad_event",
                   "bad_B0", "bad_A", "fail_sites", "final_merged",
                   "merged_nondecreasing"], rows)
        rd.finalize(cfg, {"aggregate": agg,
                          "replica_seed_roots": replica_seed_roots(seed, replicas)})
        return rd.path
    raise ConfigError(f"unknown coupling_kind {kind!r}")


def cmd_decouple(cfg: dict, out_dir: Optional[str]) -> Path:
    p = jump_distribution(cfg)
    rep = coupling.decoupling_probe(
        p, rho=cfg.get("rho", 1.0), gap=cfg.get("gap", 100.0),
        n=cfg.get("box_side", 4), replicas=cfg["replicas"], seed=cfg["seed"],
        threshold=cfg.get("threshold"), error_c=cfg.get("error_c", 1.0))
    rd = make_run_dir(out_dir, cfg.get("label", "decouple"))
    write_csv(rd.path / "decoupling.csv",
              ["rho", "rho_star", "replicas", "lhs", "lhs_ci_lo", "lhs_ci_hi",
               "e_f1", "e_f2", "error_term", "rhs", "margin", "z"],
              [(rep.rho, rep.rho_star, rep.replicas, rep.lhs, rep.lhs_ci[0],
                rep.lhs_ci[1], rep.e_f1, rep.e_f2, rep.error_term, rep.rhs,
                rep.margin, rep.z)])
    rd.finalize(cfg, {"holds_at_95": rep.holds_at_95,
                      "replica_seed_roots": replica_seed_roots(cfg["seed"], cfg["replicas"])})
    return rd.path


def cmd_renorm(cfg: dict, out_dir: Optional[str]) -> Path:
    p = jump_distribution(cfg)
    est = cfg.get("estimate", "trigger")
    seed = cfg["seed"]
    replicas = cfg["replicas"]
    rd = make_run_dir(out_dir, cfg.get("label", f"renorm_{est}"))
    rows = []
    header = ["k", "L0", "rho", "replicas", "frequency", "ci_lo", "ci_hi"]
    if est == "trigger":
        for L in (cfg["L_grid"] if "L_grid" in cfg else (4, 9, 16, 25)):
            out = renorm.trigger_estimate(p, int(L), replicas, seed)
            for name in ("slow_8L", "slow_L"):
                e = out[name]
                rows.append((name, int(L), e.params["rho"], replicas,
                             e.frequency, e.ci[0], e.ci[1]))
        header = ["event", "L", "rho", "replicas", "frequency", "ci_lo", "ci_hi"]
    elif est == "busy":
        for L in (cfg["L_grid"] if "L_grid" in cfg else (4,)):
            out = renorm.busy_site_estimate(p, cfg.get("rho", 2.0), float(L),
                                            replicas, seed)
            e = out["estimate"]
            rows.append((0, int(L), cfg.get("rho", 2.0), replicas,
                         e.frequency, e.ci[0], e.ci[1]))
        header = ["k", "L", "rho", "replicas", "frequency", "ci_lo", "ci_hi"]
    elif est == "leave":
        for L in (cfg["L_grid"] if "L_grid" in cfg else (2,)):
            e = renorm.leave_box_estimate(p, cfg.get("rho", 1.0), int(L),
                                          replicas, seed)
            rows.append((0, int(L), cfg.get("rho", 1.0), replicas,
                         e.frequency, e.ci[0], e.ci[1]))
        header = ["k", "L", "rho", "replicas", "frequency", "ci_lo", "ci_hi"]
    elif est == "box-events":
        L0 = cfg.get("L0", 4)
        k = cfg.get("k", 0)
        ladd = renorm.ladder(L0, p.d, max(k, 1))
        out = renorm.estimate_box_events(p, ladd, k, replicas, seed,
                                         rho=cfg.get("rho"))
        for which in ("E", "Ebar", "D"):
            e = out["full"].p_hat(which)
            rows.append((k, L0, out["rho"], replicas, e.p_hat, e.ci[0], e.ci[1]))
        header = ["k", "L0", "rho", "replicas", "frequency", "ci_lo", "ci_hi"]
    elif est == "recursion":
        L0 = cfg.get("L0", 2)
        ladd = renorm.ladder(L0, p.d, 1)
        e0 = renorm.estimate_Ek(p, ladd, 0, replicas, seed)
        e1 = renorm.estimate_Ek(p, ladd, 1, replicas, seed)
        for row in renorm.recursion_report(ladd, e0.p_hat, e1.p_hat):
            rows.append((row["c"], row["delta"], e0.p_hat, e1.p_hat,
                         row["base"], row["A_min"]))
        header = ["c", "delta", "p0_hat", "p1_hat", "base", "A_min"]
    else:
        raise ConfigError(f"unknown renorm estimate {est!r}")
    write_csv(rd.path / f"renorm_{est}.csv", header, rows)
    rd.finalize(cfg, {"replica_seed_roots": replica_seed_roots(seed, replicas)})
    return rd.path


def cmd_stats(cfg: dict, out_dir: Optional[str]) -> Path:
    p = jump_distribution(cfg)
    report = cfg.get("report", "poisson-tail")
    rd = make_run_dir(out_dir, cfg.get("label", f"stats_{report}"))
    if report == "poisson-tail":
        rows = []
        rho = cfg.get("rho", 1.0)
        for a in range(0, cfg.get("a_max", 30) + 1):
            t = stats.poisson_tail(rho, a)
            rows.append((rho, a, t.exact, t.chernoff_bound,
                         t.exact / t.chernoff_bound if t.chernoff_bound > 0 else ""))
        write_csv(rd.path / "poisson_tail.csv",
                  ["rho", "A", "exact", "chernoff", "ratio"], rows)
    elif report == "kernel":
        t = cfg.get("t", 16.0)
        table = stats.exact_kernel(p, t)
        rows = []
        if p.d == 1:
            for x in range(-table.radius, table.radius + 1):
                pr = table.prob(x)
                if pr > 0:
                    rows.append((x, pr))
            write_csv(rd.path / "kernel.csv", ["x_1", "prob"], rows)
        else:
            import itertools
            rng = range(-table.radius, table.radius + 1)
            for x in itertools.product(*[rng] * p.d):
                pr = table.prob(x)
                if pr > 0:
                    rows.append((*x, pr))
            write_csv(rd.path / "kernel.csv",
                      [f"x_{i+1}" for i in range(p.d)] + ["prob"], rows)
    elif report == "deviation":
        eps = cfg.get("eps", 0.3)
        rows = []
        for u in (cfg["u_grid"] if "u_grid" in cfg else (20.0, 40.0, 80.0)):
            out = stats.deviation_tail(p, eps, u, cfg.get("mc_replicas", 2000),
                                       seed=cfg["seed"])
            rows.append((eps, u, out["frequency"], out["ci"][0], out["ci"][1],
                         out["replicas"]))
        write_csv(rd.path / "deviation.csv",
                  ["eps", "u", "frequency", "ci_lo", "ci_hi", "replicas"], rows)
    elif report == "mushroom":
        out = stats.mushroom_tail(p, cfg.get("eps", 0.25),
                                  cfg.get("mc_replicas", 2000),
                                  cfg.get("horizon", 200.0), seed=cfg["seed"])
        radii = out["radii"]
        rows = [(float(r),) for r in np.sort(radii)]
        write_csv(rd.path / "mushroom_radii.csv", ["radius"], rows)
        rd.manifest["tail_slope"] = out.get("tail_slope")
        rd.manifest["unstable"] = out["unstable"]
    elif report == "meeting":
        t = cfg.get("t", 64.0)
        sep = cfg.get("separation", 2)
        exact = stats.meeting_probability(p, (0,) * p.d, (sep,) + (0,) * (p.d - 1), t)
        mc = stats.meeting_probability_mc(p, (0,) * p.d, (sep,) + (0,) * (p.d - 1), t,
                                          cfg.get("mc_replicas", 10 ** 5),
                                          seed=cfg["seed"])
        write_csv(rd.path / "meeting.csv",
                  ["t", "separation", "exact", "mc", "mc_ci_lo", "mc_ci_hi",
                   "scaled_exact"],
                  [(t, sep, exact, mc["frequency"], mc["ci"][0], mc["ci"][1],
                    exact * t ** (p.d / 2))])
    else:
        raise ConfigError(f"unknown stats report {report!r}")
    rd.finalize(cfg, {})
    return rd.path


COMMANDS = {
    "front-sweep": cmd_front_sweep,
    "gip-stats": cmd_gip_stats,
    "couple": cmd_couple,
    "decouple": cmd_decouple,
    "renorm": cmd_renorm,
    "stats": cmd_stats,
}


def run_config(cfg: dict, out_dir: Optional[str], acceptance: bool = False) -> Path:
    if cfg.get("heavy") and not acceptance:
        raise ConfigError(
            "this config is marked heavy; rerun with --acceptance "
            "(expected runtimes are documented in README.md)")
    kind = cfg["kind"]
    fn = COMMANDS[kind]
    if kind == "front-sweep":
        return fn(cfg, out_dir)
    return fn(cfg, out_dir)


def rerun_from_manifest(manifest_path, out_dir: Optional[str]) -> Path:
    """Reproduce a run from its manifest's config echo."""
    with open(manifest_path) as fh:
        man = json.load(fh)
    cfg = dict(man["config"])
    for k, v in cfg.items():
        if isinstance(v, list):
            cfg[k] = tuple(v)
    return run_config(cfg, out_dir, acceptance=True)
