"""Experiment harness: config files, run / sweep / report subcommands.

Config files are ``key = value`` lines; ``#`` starts a comment. Keys are
the FlowConfig fields plus ``out_dir`` and ``resume``. Exit codes of a run:
0 Converged-KE, 2 Diverged, 3 NumericalFailure, 4 Inconclusive, 5 I/O
failure, 1 bad configuration.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import estimates as est
from . import flow
from . import functionals as fn
from . import geometry as geo
from .errors import ConfigurationError, KRFlowError

log = logging.getLogger("krflow")

EXIT_CODES = {flow.CONVERGED: 0, flow.DIVERGED: 2, flow.FAILED: 3, flow.INCONCLUSIVE: 4}
EXIT_CONFIG, EXIT_IO = 1, 5
HARNESS_KEYS = ("out_dir", "resume")
_FLOW_FIELDS = {f.name: f for f in fields(flow.FlowConfig)}
_HINTS = typing.get_type_hints(flow.FlowConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    flow: flow.FlowConfig = field(default_factory=flow.FlowConfig)
    out_dir: str = "krflow-out"
    resume: str | None = None

    @property
    def output_dir(self):
        return Path(os.environ.get("KRFLOW_OUT") or self.out_dir)


@dataclass
class RunSummary:
    outcome: str
    exit_code: int
    final: dict
    constants: dict
    alpha_hat: float
    threshold_passed: bool
    rate: float | None
    wall_time: float
    config_hash: str
    c0: float
    classification: str
    labels: dict
    monotonicity_violations: list
    properness: str
    max_vol_err: float
    failure: str | None

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True, indent=2)


# --------------------------------------------------------------------------
# config parsing


def _convert(key, text):
    text = text.strip()
    hint = _HINTS[key]
    optional = type(None) in typing.get_args(hint)
    if optional and text.lower() == "none":
        return None
    base = next((a for a in typing.get_args(hint) if a is not type(None)), hint)
    try:
        if base is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if base is int:
            return int(text)
        if base is float:
            return float(text)
        if base is tuple:
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigurationError(f"cannot parse {key} = {text!r}", key=key) from None


def parse_text(text):
    flow_kw, harness = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in HARNESS_KEYS:
            harness[key] = None if value.lower() == "none" else value
        elif key in _FLOW_FIELDS:
            flow_kw[key] = _convert(key, value)
        else:
            raise ConfigurationError(f"unknown config key {key!r}", key=key)
    cfg = ExperimentConfig(flow.FlowConfig(**flow_kw), **harness)
    validate(cfg)
    return cfg


def parse_config(path):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}", key="config") from e
    return parse_text(text)


def validate(cfg):
    if cfg.flow.preset not in geo.registry():
        raise ConfigurationError(f"unknown preset {cfg.flow.preset!r}", key="preset")
    cfg.flow.validate()
    return cfg


def serialize(cfg):
    lines = []
    for name, value in cfg.flow.to_dict().items():
        if isinstance(value, list):
            value = ", ".join(repr(float(v)) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name} = {value}")
    lines.append(f"out_dir = {cfg.out_dir}")
    lines.append(f"resume = {cfg.resume}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# single runs


def _fmt(v):
    return format(float(v), ".17g")


def csv_text(snapshots):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fn.CSV_FIELDS)
    for s in snapshots:
        w.writerow([_fmt(v) for v in s.row()])
    return buf.getvalue()


def monotonicity_violations(snapshots, dt):
    """Indices where F or nu rise by more than 1e-8 + 10 dt^2 between snapshots."""
    slack = 1e-8 + 10.0 * dt**2
    out = []
    for k in range(1, len(snapshots)):
        a, b = snapshots[k - 1], snapshots[k]
        for name in ("F", "nu"):
            if getattr(b, name) - getattr(a, name) > slack:
                out.append({"index": k, "t": b.t, "functional": name,
                            "increase": getattr(b, name) - getattr(a, name)})
    return out


def analyse(traj, cfg):
    """Delta sweep, inequality monitors and run-level flags of a trajectory."""
    fc = cfg.flow
    ref = flow.build_problem(fc).ref
    sweep = fn.sweep_from_integrals(fc.deltas, [s["alpha"] for s in traj.stats], fc.budget, ref.n)
    report = est.inequality_monitors(traj.monitor_inputs(), ref.n, sweep.alpha_hat or None,
                                     osc_budget=fc.divergence_osc_budget, strict=False)
    _, properness = fn.properness_scatter(traj.snapshots)
    return sweep, report, properness


def run_experiment(cfg, progress=None):
    """Run one flow and write run.csv, monitors.json, summary.json and final.bin."""
    validate(cfg)
    out = cfg.output_dir
    start = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    fc = cfg.flow
    traj = flow.run(fc, resume=cfg.resume, checkpoint_path=out / "checkpoint.bin", progress=progress)
    sweep, report, properness = analyse(traj, cfg)
    snaps = traj.snapshots
    grid = flow.build_problem(fc).grid
    (out / "run.csv").write_text(csv_text(snaps))
    monitors = json.loads(report.to_json())
    monitors["delta_sweep"] = json.loads(sweep.to_json())
    (out / "monitors.json").write_text(json.dumps(monitors, sort_keys=True, indent=2))
    geo.save_field(out / "final.bin", traj.history[-1] + traj.gauge[-1], grid)
    summary = RunSummary(
        outcome=traj.outcome, exit_code=EXIT_CODES[traj.outcome], final=snaps[-1].__dict__,
        constants={k: m.constant for k, m in report.monitors.items()}, alpha_hat=sweep.alpha_hat,
        threshold_passed=sweep.threshold_passed, rate=traj.rate, wall_time=time.perf_counter() - start,
        config_hash=fc.hash(), c0=traj.c0, classification=report.classification, labels=report.labels,
        monotonicity_violations=monotonicity_violations(snaps, fc.dt), properness=properness,
        max_vol_err=max(s.vol_err for s in snaps), failure=traj.failure,
    )
    (out / "summary.json").write_text(summary.to_json())
    (out / "config.txt").write_text(serialize(cfg))
    return summary


# --------------------------------------------------------------------------
# sweeps


def _sweep_worker(args):
    cfg, label = args
    try:
        s = run_experiment(cfg)
        return {"value": label, "dir": str(cfg.out_dir), "outcome": s.outcome, "exit_code": s.exit_code,
                "error": None}
    except (KRFlowError, OSError, ValueError) as e:
        return {"value": label, "dir": str(cfg.out_dir), "outcome": None, "exit_code": None,
                "error": f"{type(e).__name__}: {e}"}


def order_table(dirs, dts):
    """Observed orders from final potentials at successive dt halvings."""
    fields_ = [geo.load_field(Path(d) / "final.bin")[0] for d in dirs]
    rows = []
    for k in range(len(dts) - 1):
        err = float(np.abs(fields_[k] - fields_[k + 1]).max())
        rows.append({"dt": dts[k], "dt_next": dts[k + 1], "difference": err})
    for k in range(len(rows) - 1):
        a, b = rows[k]["difference"], rows[k + 1]["difference"]
        ratio = rows[k]["dt"] / rows[k + 1]["dt"]
        rows[k + 1]["order"] = math.log(a / b) / math.log(ratio) if a > 0 and b > 0 else None
    return rows


def sweep(cfg, axis, values, workers=1):
    """One run per value of ``axis``, each in its own directory, plus index.json."""
    validate(cfg)
    if axis not in _FLOW_FIELDS or _HINTS[axis] not in (int, float, bool, str, float | None, int | None):
        raise ConfigurationError(f"{axis!r} is not a sweepable scalar parameter", key=axis)
    base = cfg.output_dir
    jobs = []
    for v in values:
        label = _convert(axis, str(v))
        sub = base / f"{axis}={label}"
        try:
            fc = flow.with_overrides(cfg.flow, **{axis: label})
        except ConfigurationError as e:
            jobs.append((None, label, sub, str(e)))
            continue
        jobs.append((replace(cfg, flow=fc, out_dir=str(sub), resume=None), label, sub, None))
    runnable = [(c, lab) for c, lab, _, err in jobs if c is not None]
    env_out = os.environ.pop("KRFLOW_OUT", None)  # children write under their own directories
    try:
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                results = list(ex.map(_sweep_worker, runnable))
        else:
            results = [_sweep_worker(j) for j in runnable]
    finally:
        if env_out is not None:
            os.environ["KRFLOW_OUT"] = env_out
    it = iter(results)
    runs = []
    for c, label, sub, err in jobs:
        runs.append(next(it) if c is not None else
                    {"value": label, "dir": str(sub), "outcome": None, "exit_code": None, "error": err})
    index = {"axis": axis, "runs": runs}
    ok = [r for r in runs if r["error"] is None]
    if axis == "dt" and len(ok) >= 2:
        index["order"] = order_table([r["dir"] for r in ok], [r["value"] for r in ok])
    base.mkdir(parents=True, exist_ok=True)
    (base / "index.json").write_text(json.dumps(index, sort_keys=True, indent=2))
    return index


# --------------------------------------------------------------------------
# reports


def _read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: [float(r[k]) for r in rows] for k in fn.CSV_FIELDS}


def _svg(series, title):
    """A static line plot of one series per panel."""
    w, h, pad = 320, 160, 30
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * w}" height="{2 * h + 20}">',
             f'<text x="10" y="14" font-size="12">{title}</text>']
    for i, (name, (t, y)) in enumerate(series.items()):
        ox, oy = (i % 2) * w, 20 + (i // 2) * h
        t, y = np.asarray(t), np.asarray(y)
        keep = np.isfinite(y)
        parts.append(f'<text x="{ox + pad}" y="{oy + 12}" font-size="11">{name}</text>')
        if keep.sum() < 2:
            continue
        t, y = t[keep], y[keep]
        y0, y1 = y.min(), y.max()
        span_t = (t[-1] - t[0]) or 1.0
        span_y = (y1 - y0) or 1.0
        px = ox + pad + (t - t[0]) / span_t * (w - 2 * pad)
        py = oy + h - pad + (y0 - y) / span_y * (h - 2 * pad)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        parts.append(f'<polyline fill="none" stroke="black" points="{pts}"/>')
        parts.append(f'<text x="{ox + pad}" y="{oy + h - 8}" font-size="9">[{y0:.3g}, {y1:.3g}]</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report(dirs, out=None, svg=False):
    """Aggregate run directories into report.json (and SVG plots on request)."""
    runs, warnings = [], []
    for d in dirs:
        d = Path(d)
        try:
            s = json.loads((d / "summary.json").read_text())
            data = _read_csv(d / "run.csv")
        except (OSError, ValueError, KeyError) as e:
            warnings.append(f"{d}: {type(e).__name__}: {e}")
            continue
        runs.append({
            "dir": str(d), "outcome": s["outcome"], "classification": s["classification"],
            "monotonicity_violations": len(s["monotonicity_violations"]), "alpha_hat": s["alpha_hat"],
            "threshold_passed": s["threshold_passed"], "rate": s["rate"], "properness": s["properness"],
            "max_vol_err": s["max_vol_err"], "final_osc": data["osc"][-1], "final_sup_h": data["sup_h"][-1],
        })
        if svg:
            t = data["t"]
            plot = _svg({k: (t, data[k]) for k in ("F", "nu", "osc", "sup_h")}, d.name)
            (d / "plots.svg").write_text(plot)
    classes = sorted({r["classification"] for r in runs})
    rep = {"runs": runs, "classifications": classes, "mixed": "Mixed" in classes, "warnings": warnings}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(rep, sort_keys=True, indent=2))
    return rep


# --------------------------------------------------------------------------
# command line


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse's own exit status 2 would read as "Diverged"
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _progress(s):
    log.info("t=%.3f osc=%.4g sup_h=%.3g vol_err=%.2g", s["t"], s["sup_u"] - s["inf_u"], s["sup_h"],
             abs(s["vol_ev"] - 1.0))


def main(argv=None):
    p = _Parser(prog="krflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config")
    r.add_argument("--resume", help="checkpoint file to resume from")
    s = sub.add_parser("sweep", help="one run per value of a parameter")
    s.add_argument("config")
    s.add_argument("--axis", required=True)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--workers", type=int, default=1)
    rp = sub.add_parser("report", help="aggregate run directories")
    rp.add_argument("dirs", nargs="*")
    rp.add_argument("--out", default=".")
    rp.add_argument("--svg", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "report":
            rep = report(args.dirs, args.out, args.svg)
            for w in rep["warnings"]:
                log.warning(w)
            return 0
        cfg = parse_config(args.config)
        if args.command == "run":
            if args.resume:
                cfg = replace(cfg, resume=args.resume)
            summary = run_experiment(cfg, progress=_progress if args.verbose else None)
            print(f"{summary.outcome} ({summary.classification}) -> {cfg.output_dir}")
            return summary.exit_code
        index = sweep(cfg, args.axis, [v for v in args.values.split(",") if v.strip()], args.workers)
        for run_ in index["runs"]:
            print(f"{args.axis}={run_['value']}: {run_['outcome'] or run_['error']}")
        return 0
    except ConfigurationError as e:
        print(f"configuration error ({e.key}): {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
