"""Boundedness quantities, inequality monitors and curvature monitors.

The seven C0-type quantities of a potential are expected to be bounded or
unbounded together along a flow line. Finite runs are judged by trends
over their final third; constants in the inequality monitors are
calibrated on a burn-in window rather than derived.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse.linalg as spla

from . import geometry as geo
from .errors import EquivalenceViolation, NumericalError

QUANTITIES = ("q1", "q2", "q3", "q4", "q5", "q6", "q7")


@dataclass
class BoundsRecord:
    t: float
    q1: float  # sup |phi|
    q2: float  # sup phi
    q3: float  # inf phi
    q4: float  # (1/V) int phi omega^n
    q5: float  # (1/V) int (-phi) omega_phi^n
    q6: float  # I(phi)
    q7: float  # osc phi

    def values(self):
        return np.array([getattr(self, q) for q in QUANTITIES])


def bounds_from_stats(t, sup_phi, inf_phi, int_ref, int_neg_ev, I):
    return BoundsRecord(t, max(abs(sup_phi), abs(inf_phi)), sup_phi, inf_phi, int_ref, int_neg_ev, I,
                        sup_phi - inf_phi)


def snapshot_bounds(pf, ref, t=0.0):
    from .functionals import compute_I

    phi = pf.values
    return bounds_from_stats(
        t, float(phi.max()), float(phi.min()),
        geo.integrate(phi, "reference", pf, ref), geo.integrate(-phi, "evolved", pf, ref),
        compute_I(pf, ref),
    )


# --------------------------------------------------------------------------
# curvature monitors


class PerelmanRecord(NamedTuple):
    sup_R: float
    sup_h: float
    sup_gradh: float
    sup_R_dev: float  # sup |R - n|


def perelman_monitor(pf, ref, floor=1e-4):
    """sup |R|, sup |h_phi| and sup |grad h_phi| in the evolved metric.

    Curvature and gradient sups are taken over nodes with det0 >= floor *
    max det0. Beyond that, R multiplies second differences of log det H by
    H^-1 and is dominated by rounding amplified by H^-2.
    """
    R = geo.scalar_curvature(pf, ref)
    h, _ = geo.ricci_potential(pf, ref)
    gh = geo.grad_norm_sq(geo.ricci_potential_gradient(pf, ref), pf)
    core = geo.core_mask(ref, floor)
    return PerelmanRecord(
        float(np.abs(R[core]).max()), float(np.abs(h).max()), float(np.sqrt(np.abs(gh[core]).max())),
        float(np.abs(R[core] - ref.n).max()),
    )


def laplacian_operator(pf, ref):
    """u -> -tr(H^-1 D^2 u), the weighted Laplacian -div(det H H^-1 grad u) / det H."""
    grid = ref.grid
    Hi = pf.Hinv
    if ref.n == 1:
        coefs = [-Hi[0, 0], np.zeros(grid.size)]
    else:
        coefs = [-Hi[0, 0], -2.0 * Hi[0, 1], -Hi[1, 1], np.zeros(grid.size)]
    return grid.combine(coefs)


class Eigenpair(NamedTuple):
    value: float
    vector: np.ndarray
    residual: float
    iterations: int


def first_eigenpair(pf, ref, tol=1e-9, maxiter=500):
    """Smallest nonzero eigenvalue of the weighted Laplacian.

    Inverse iteration with a small negative shift; constants are deflated
    in the evolved-measure inner product after every solve.
    """
    A = laplacian_operator(pf, ref).tocsc()
    M = ref.grid.weights * pf.detH
    M = M / M.sum()

    def deflate(u):
        return u - np.dot(M, u)

    def norm(u):
        return float(np.sqrt(np.dot(M, u * u)))

    shift = -1e-3
    lu = spla.splu((A - shift * geo.sp.identity(A.shape[0], format="csc")).tocsc(), permc_spec="MMD_AT_PLUS_A",
                   diag_pivot_thresh=0.0)
    u = deflate(np.random.default_rng(0).standard_normal(A.shape[0]))
    u /= norm(u)
    lam = np.inf
    res = np.inf
    for it in range(1, maxiter + 1):
        v = deflate(lu.solve(u))
        v /= norm(v)
        Av = A @ v
        lam_new = float(np.dot(M, v * Av))
        res = norm(Av - lam_new * v)
        u, lam = v, lam_new
        if res <= tol * max(1.0, abs(lam)):
            return Eigenpair(lam, u, res, it)
    raise NumericalError(f"inverse iteration did not converge: residual {res:.2e} after {maxiter} iterations")


def poincare_proxy(pf, ref, tol=1e-9, maxiter=500):
    """1 / lambda_1 of the weighted Laplacian on invariant functions."""
    return 1.0 / first_eigenpair(pf, ref, tol, maxiter).value


# --------------------------------------------------------------------------
# trend classification


def trend(t, y):
    """Least-squares slope of y(t) over the final third of the samples."""
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    tail = t >= t[0] + 2.0 * (t[-1] - t[0]) / 3.0
    if tail.sum() < 2:
        return 0.0, tail
    return float(np.polyfit(t[tail], y[tail], 1)[0]), tail


def label_series(t, y, budget=20.0, flat=1e-3, steep=1e-2, monotone=0.9):
    """'bounded', 'unbounded' or 'inconclusive' for a scalar time series.

    Bounded: |final-third slope| < flat and |y| stays below budget.
    Unbounded: |y| grows monotonically with slope > steep and its final
    value exceeds budget.
    """
    a = np.abs(np.asarray(y, float))
    slope, tail = trend(t, a)
    if abs(slope) < flat and a.max() < budget:
        return "bounded"
    steps = np.diff(a[tail])
    if steps.size and slope > steep and np.mean(steps > 0) >= monotone and a[-1] > budget:
        return "unbounded"
    return "inconclusive"


def _budgets(osc_budget):
    # q2 and q3 each carry part of the oscillation; the integral quantities are
    # bounded by sup and inf
    return {"q1": osc_budget / 4, "q2": osc_budget / 4, "q3": osc_budget / 4, "q4": osc_budget / 4,
            "q5": osc_budget / 4, "q6": osc_budget / 4, "q7": osc_budget}


def equivalence_report(records, osc_budget=20.0, strict=True):
    """Label q1..q7 and classify AllBounded / AllUnbounded / Mixed / Inconclusive.

    ``strict`` raises EquivalenceViolation on Mixed.
    """
    if len(records) < 10:
        raise ValueError("equivalence_report needs at least 10 snapshots")
    t = [r.t for r in records]
    budgets = _budgets(osc_budget)
    labels = {q: label_series(t, [getattr(r, q) for r in records], budgets[q]) for q in QUANTITIES}
    kinds = set(labels.values())
    if kinds == {"bounded"}:
        cls = "AllBounded"
    elif kinds == {"unbounded"}:
        cls = "AllUnbounded"
    elif {"bounded", "unbounded"} <= kinds:
        cls = "Mixed"
    else:
        cls = "Inconclusive"
    if cls == "Mixed" and strict:
        raise EquivalenceViolation(f"boundedness classes disagree: {labels}")
    return cls, labels


# --------------------------------------------------------------------------
# inequality monitors


@dataclass
class Monitor:
    """LHS and RHS (without constant) per snapshot; residual = LHS - RHS."""

    name: str
    lhs: list
    rhs: list
    constant: float = 0.0
    calibrated: bool = True
    tolerance: float = 0.0
    violations: list = field(default_factory=list)
    trend: float = 0.0
    stable: bool = True

    @property
    def residual(self):
        return np.asarray(self.lhs) - np.asarray(self.rhs)


@dataclass
class MonitorReport:
    monitors: dict
    classification: str
    labels: dict

    def violated(self):
        return {k: m.violations for k, m in self.monitors.items() if m.violations}

    def to_json(self):
        out = {"classification": self.classification, "labels": self.labels, "monitors": {}}
        for k, m in self.monitors.items():
            d = asdict(m)
            d["residual"] = m.residual.tolist()
            out["monitors"][k] = d
        return json.dumps(out, sort_keys=True)


def _calibrate(m, t, burn_in, bounded, slack, trend_tol):
    r = m.residual
    t = np.asarray(t, float)
    window = t <= t[0] + burn_in * (t[-1] - t[0])
    if m.calibrated:
        m.constant = float(r[window].max())
    bad = np.flatnonzero(r > m.constant + m.tolerance + slack * (abs(m.constant) + 1.0))
    if bounded and m.calibrated:
        m.violations = [int(i) for i in bad]
        m.trend, _ = trend(t, r)
        m.stable = abs(m.trend) < trend_tol
    elif not m.calibrated:
        m.violations = [int(i) for i in bad]
    return m


def inequality_monitors(snaps, n, alpha_hat=None, burn_in=0.1, osc_budget=20.0, strict=True,
                        slack=0.25, trend_tol=1e-2):
    """Both sides of every implication between the seven bounds, per snapshot.

    ``snaps`` are dicts with keys t, bounds (BoundsRecord), sup_rhs9
    (sup(-phidot - h_ref)) and vol_ev ((1/V) int omega_phi^n).
    Steps with an unknown constant are calibrated on the first
    ``burn_in`` fraction of the run; on bounded runs their residuals must
    stay within the constant (``slack`` relative) and be trend-free.
    The remaining steps hold with no constant up to quadrature tolerance.
    """
    t = [s["t"] for s in snaps]
    b = [s["bounds"] for s in snaps]
    cls, labels = equivalence_report(b, osc_budget, strict) if len(b) >= 10 else ("Inconclusive", {})
    bounded = cls == "AllBounded"
    zeros = [0.0] * len(b)
    mon = {}
    # step 1: sup phi <= (1 - delta)/delta (1/V) int -phi omega_phi^n + C
    if alpha_hat:
        d = min(alpha_hat, 1.0)
        mon["step1"] = Monitor("q2 <= (1-d)/d q5 + C", [r.q2 for r in b], [(1 - d) / d * r.q5 for r in b])
    # step 2: ||phi|| <= C (max(0, sup phi) + 1)
    mon["step2"] = Monitor("q1 / (max(0, q2) + 1) <= C", [r.q1 / (max(0.0, r.q2) + 1.0) for r in b], zeros)
    mon["step3"] = Monitor("-q3 <= q1", [-r.q3 for r in b], [r.q1 for r in b], calibrated=False, tolerance=1e-12)
    mon["step4"] = Monitor("q5 <= -q3 vol", [r.q5 for r in b], [-r.q3 * s["vol_ev"] for r, s in zip(b, snaps)],
                           calibrated=False, tolerance=1e-12)
    mon["step5"] = Monitor("q4 <= q1", [r.q4 for r in b], [r.q1 for r in b], calibrated=False, tolerance=1e-12)
    # step 6: sup phi - (1/V) int phi omega^n <= C for every admissible phi
    mon["step6"] = Monitor("q2 - q4 <= C", [r.q2 - r.q4 for r in b], zeros)
    mon["step7"] = Monitor("q7 <= 2 q1", [r.q7 for r in b], [2 * r.q1 for r in b], calibrated=False,
                           tolerance=1e-12)
    mon["step8"] = Monitor("q6 <= q7", [r.q6 for r in b], [r.q7 for r in b], calibrated=False, tolerance=1e-6)
    mon["step9"] = Monitor("q5 <= q6 + sup(-phidot - h)", [r.q5 for r in b],
                           [r.q6 + s["sup_rhs9"] for r, s in zip(b, snaps)], calibrated=False, tolerance=1e-6)
    mon["step9_origin"] = Monitor("-q4 <= sup(-phidot - h)", [-r.q4 for r in b], [s["sup_rhs9"] for s in snaps],
                                  calibrated=False, tolerance=1e-6)
    mon["step9_identity"] = Monitor("|q5 - q6 + q4| <= 0", [abs(r.q5 - r.q6 + r.q4) for r in b], zeros,
                                    calibrated=False, tolerance=1e-8)
    # sup bound of the first lemma: (1/V) int -phi omega_phi^n <= n sup phi + C
    mon["lemma_sup"] = Monitor("q5 <= n q2 + C", [r.q5 for r in b], [n * r.q2 for r in b])
    for m in mon.values():
        _calibrate(m, t, burn_in, bounded, slack if m.calibrated else 0.0, trend_tol)
    return MonitorReport(mon, cls, labels)
