"""Energy functionals along potentials: I, J, F0, F, the K-energy nu and
the exponential integrals behind the alpha-invariant.

Wedge products of (1,1)-forms become mixed determinants of their Hessian
matrices. For n = 2, i d(phi) ^ dbar(phi) ^ alpha is half the quadratic
form of grad(phi) with the cofactor matrix of alpha; for n = 1 every wedge
is a pointwise product. The overall factor is the one for which the
difference-of-measures and Dirichlet forms of I agree.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import geometry as geo
from . import kernels
from .errors import CalibrationError

CSV_FIELDS = (
    "t", "sup_phi", "inf_phi", "osc", "I", "J", "F0", "F", "nu", "int_phi_ref", "int_negphi_ev",
    "sup_phidot", "sup_R", "sup_h", "sup_gradh", "cp_proxy", "vol_err",
)


@dataclass
class FunctionalSnapshot:
    t: float
    sup_phi: float
    inf_phi: float
    osc: float
    I: float
    J: float
    F0: float
    F: float
    nu: float
    int_phi_ref: float
    int_negphi_ev: float
    sup_phidot: float
    sup_R: float
    sup_h: float
    sup_gradh: float
    cp_proxy: float
    vol_err: float

    def row(self):
        return [getattr(self, k) for k in CSV_FIELDS]


assert tuple(f.name for f in fields(FunctionalSnapshot)) == CSV_FIELDS


def _mean(values, ref):
    return kernels.pairwise_sum(np.ascontiguousarray(values)) / ref.volume


def _cofactor_form(g, A):
    """g^T cof(A) g per node for 2x2 matrix fields."""
    return A[1, 1] * g[0] ** 2 - 2.0 * A[0, 1] * g[0] * g[1] + A[0, 0] * g[1] ** 2


def dirichlet_terms(pf, ref):
    """Densities of i d(phi) ^ dbar(phi) ^ omega^i ^ omega_phi^(n-1-i), i = 0..n-1."""
    g = pf.grad
    if ref.n == 1:
        return [g[0] ** 2]
    return [0.5 * _cofactor_form(g, pf.H), 0.5 * _cofactor_form(g, ref.H0)]


def _dirichlet_integrals(pf, ref):
    w = ref.grid.weights
    return [_mean(w * d, ref) for d in dirichlet_terms(pf, ref)]


def I_forms(pf, ref):
    """(difference-of-measures form, Dirichlet-sum form) of I."""
    w = ref.grid.weights
    measures = _mean(w * pf.values * (ref.det0 - pf.detH), ref)
    return measures, float(sum(_dirichlet_integrals(pf, ref)))


def compute_I(pf, ref, rtol=None, atol=1e-12):
    """I = (1/V) int phi (omega^n - omega_phi^n).

    With ``rtol`` set, the Dirichlet-sum form is computed as well and a
    disagreement beyond ``rtol * |I| + atol`` raises CalibrationError.
    """
    measures, dirichlet = I_forms(pf, ref)
    if rtol is not None and abs(measures - dirichlet) > rtol * abs(measures) + atol:
        raise CalibrationError(
            f"I forms disagree: measures {measures:.12e}, Dirichlet {dirichlet:.12e}"
        )
    return measures


def compute_J(pf, ref):
    n = ref.n
    return float(sum((i + 1) / (n + 1) * a for i, a in enumerate(_dirichlet_integrals(pf, ref))))


def _log_mean_exp(x, measure, ref):
    """log((1/V) sum w measure e^x), factoring out max(x)."""
    top = float(np.max(x))
    s = kernels.pairwise_sum(np.ascontiguousarray(ref.grid.weights * measure * np.exp(x - top)))
    return float(np.log(s / ref.volume) + top)


def compute_F0(pf, ref):
    return compute_J(pf, ref) - geo.integrate(pf.values, "reference", pf, ref)


def compute_F(pf, ref):
    """F = F0 - log((1/V) int e^(h_ref - phi) omega^n)."""
    return compute_F0(pf, ref) - _log_mean_exp(ref.h_ref - pf.values, ref.det0, ref)


def compute_nu(pf, ref, h_phi=None):
    """K-energy nu = F + (1/V) int h omega^n - (1/V) int h_phi omega_phi^n."""
    if h_phi is None:
        h_phi, _ = geo.ricci_potential(pf, ref)
    return (compute_F(pf, ref) + geo.integrate(ref.h_ref, "reference", pf, ref)
            - geo.integrate(h_phi, "evolved", pf, ref))


def alpha_integral(phi, ref, delta):
    """(1/V) int e^(-delta (phi - sup phi)) omega^n over the reference measure."""
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    phi = getattr(phi, "values", phi)
    if delta == 0:
        return 1.0
    x = -delta * (phi - np.max(phi))
    return kernels.pairwise_sum(np.ascontiguousarray(ref.grid.weights * ref.det0 * np.exp(x))) / ref.volume


@dataclass
class DeltaSweepResult:
    deltas: list
    sup_integrals: list
    alpha_hat: float
    budget: float
    n: int

    @property
    def threshold(self):
        return self.n / (self.n + 1)

    @property
    def threshold_passed(self):
        return self.alpha_hat > self.threshold

    def to_json(self):
        d = asdict(self)
        d.pop("n")
        d["threshold"] = self.threshold
        d["threshold_passed"] = self.threshold_passed
        return json.dumps(d, sort_keys=True)


def delta_sweep(trajectory, ref, deltas, budget=1e3):
    """Sup over the trajectory of the alpha integral, for each delta.

    ``trajectory`` holds potentials (arrays or objects with ``values``).
    alpha_hat is the largest delta whose sup stays within ``budget``, or 0.
    """
    if not trajectory:
        raise ValueError("trajectory is empty")
    table = [[alpha_integral(phi, ref, d) for d in deltas] for phi in trajectory]
    return sweep_from_integrals(deltas, table, budget, ref.n)


def sweep_from_integrals(deltas, table, budget, n):
    """DeltaSweepResult from alpha integrals tabulated per snapshot (rows) and delta (columns)."""
    deltas = [float(d) for d in deltas]
    if any(b <= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be strictly increasing")
    table = np.asarray(table, float).reshape(-1, len(deltas))
    if table.shape[0] == 0:
        raise ValueError("trajectory is empty")
    # the integrand is nondecreasing in delta pointwise; rounding must not break that
    sups = list(np.maximum.accumulate(table.max(axis=0)))
    alpha_hat = 0.0
    for d, s in zip(deltas, sups):
        if s > budget:
            break
        alpha_hat = d
    return DeltaSweepResult(deltas, [float(s) for s in sups], alpha_hat, float(budget), n)


def properness_scatter(snapshots, slope_tol=1e-2):
    """(I, F) pairs plus a flag.

    "violating" when F keeps decreasing over the final third of the run
    (slope below -slope_tol per unit time) while I grows; otherwise
    "consistent".
    """
    pairs = [(float(s.I), float(s.F)) for s in snapshots]
    if len(snapshots) < 3:
        return pairs, "consistent"
    t = np.array([s.t for s in snapshots])
    tail = t >= t[0] + 2.0 * (t[-1] - t[0]) / 3.0
    if tail.sum() < 2:
        return pairs, "consistent"
    F = np.array([p[1] for p in pairs])[tail]
    Iv = np.array([p[0] for p in pairs])[tail]
    f_slope = np.polyfit(t[tail], F, 1)[0]
    i_slope = np.polyfit(t[tail], Iv, 1)[0]
    if f_slope < -slope_tol and i_slope > 0:
        return pairs, "violating"
    return pairs, "consistent"
