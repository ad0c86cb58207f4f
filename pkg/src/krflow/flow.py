"""Time integration of the reduced Kahler-Ricci flow

    d phi / dt = log(det H / det H0) + phi - h_ref.

The right-hand side commutes with adding constants except through the
+phi term, so a constant offset grows like e^t. The integrator evolves a
gauge-fixed potential u whose reference-measure mean is pinned, and
records the constant removed at every step. The true potential is
phi = u + a(t), where a obeys the scalar recursion a_k = g a_{k-1} + s_k
(g is the scheme's growth factor for constants). The initial constant
a_0 follows the configured policy. The bounded choice is recovered by
running the recursion backwards from the probe time, which is stable.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla
from scipy import optimize

from . import estimates as est
from . import functionals as fn
from . import geometry as geo
from .errors import AdmissibilityError, ConfigurationError, NumericalError

SCHEMES = ("imex", "rk4")
C0_POLICIES = ("zero", "mean_h", "bisect")
CONVERGED, DIVERGED, INCONCLUSIVE, FAILED = "Converged-KE", "Diverged", "Inconclusive", "NumericalFailure"
DEFAULT_DELTAS = tuple(round(0.05 * k, 2) for k in range(1, 31))


@dataclass(frozen=True)
class FlowConfig:
    preset: str = "cp1"
    L: float | None = None
    N: int | None = None
    order: int = 6
    reference: str = "guillemin"
    dt: float = 0.05
    t_max: float = 30.0
    scheme: str = "imex"
    c0_policy: str = "bisect"
    probe_time: float | None = None
    probe_range: float = 10.0
    symmetrize: bool = False
    seed: int = 0
    amplitude: float = 0.0
    n_bumps: int = 3
    convergence_tol: float = 1e-3
    divergence_osc_budget: float = 20.0
    stop_on_divergence: bool = True
    cadence: int = 10
    checkpoint_every: int = 0
    newton_tol: float = 1e-10
    tail_tol: float = 1e-5
    monitor_floor: float = 1e-4
    deltas: tuple = DEFAULT_DELTAS
    budget: float = 1e3
    poincare: bool = True

    def validate(self):
        def positive(name):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}", key=name)

        for name in ("dt", "convergence_tol", "divergence_osc_budget", "newton_tol", "tail_tol",
                     "probe_range", "budget", "monitor_floor"):
            positive(name)
        if not self.t_max >= 0:
            raise ConfigurationError(f"t_max must be >= 0, got {self.t_max}", key="t_max")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}", key="scheme")
        if self.c0_policy not in C0_POLICIES:
            raise ConfigurationError(f"c0_policy must be one of {C0_POLICIES}, got {self.c0_policy!r}",
                                     key="c0_policy")
        if self.reference not in ("guillemin", "ke"):
            raise ConfigurationError(f"reference must be guillemin or ke, got {self.reference!r}", key="reference")
        if self.amplitude < 0:
            raise ConfigurationError(f"amplitude must be >= 0, got {self.amplitude}", key="amplitude")
        if not 1 <= self.n_bumps <= 5:
            raise ConfigurationError(f"n_bumps must be in 1..5, got {self.n_bumps}", key="n_bumps")
        if self.cadence < 1:
            raise ConfigurationError(f"cadence must be >= 1, got {self.cadence}", key="cadence")
        if self.checkpoint_every < 0:
            raise ConfigurationError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}",
                                     key="checkpoint_every")
        if self.probe_time is not None and not 0 < self.probe_time <= self.t_max:
            raise ConfigurationError(f"probe_time must be in (0, t_max], got {self.probe_time}", key="probe_time")
        if any(not 0 < d <= 1.5 for d in self.deltas) or list(self.deltas) != sorted(set(self.deltas)):
            raise ConfigurationError("deltas must be increasing values in (0, 1.5]", key="deltas")
        if self.N is not None and self.N % 2 == 0:
            raise ConfigurationError(f"N must be odd, got {self.N}", key="N")
        return self

    @property
    def steps(self):
        return int(round(self.t_max / self.dt))

    def to_dict(self):
        d = asdict(self)
        d["deltas"] = list(self.deltas)
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# problem setup


@dataclass
class Problem:
    model: geo.ReducedModel
    grid: geo.Grid
    ref: geo.ReferenceData


_PROBLEMS = {}


def build_problem(config):
    key = (config.preset, config.L, config.N, config.order, config.reference, config.tail_tol)
    if key not in _PROBLEMS:
        model = geo.build_model(config.preset)
        grid = geo.make_grid(model, config.L, config.N, config.order)
        ref = geo.build_reference(model, grid, config.reference, config.tail_tol)
        if len(_PROBLEMS) > 8:
            _PROBLEMS.clear()
        _PROBLEMS[key] = Problem(model, grid, ref)
    return _PROBLEMS[key]


def perturbation(problem, seed, amplitude, n_bumps=3, margin=0.5):
    """Symmetrized sum of Gaussians in x with sup |p| = amplitude.

    Widths lie in [1, 1.6] and centres in [-1.5, 1.5]^n so that the bumps
    are negligible against the reference Hessian at the domain faces.
    """
    grid, ref = problem.grid, problem.ref
    if amplitude == 0:
        return np.zeros(grid.size)
    rng = np.random.default_rng(seed)
    n = grid.n
    p = geo.gaussian_bumps(grid, rng.uniform(-1.5, 1.5, (n_bumps, n)), rng.uniform(1.0, 1.6, n_bumps),
                           rng.uniform(-1.0, 1.0, n_bumps))
    p = geo.symmetrize(p, ref.perms)
    p *= amplitude / np.abs(p).max()
    if geo.admissible_scale(p, ref, margin) < 1.0:
        raise ConfigurationError(
            f"perturbation amplitude {amplitude} leaves less than {margin} of the reference Hessian",
            key="amplitude",
        )
    return p


# --------------------------------------------------------------------------
# right-hand side and steppers


def phidot(pf, ref):
    """log(det H / det H0) + phi - h_ref."""
    return pf.logdetH - ref.logdet0 + pf.values - ref.h_ref


def _jacobian(pf, ref, beta):
    """I - beta d(log det H)."""
    Hi = pf.Hinv
    if ref.n == 1:
        coefs = [-beta * Hi[0, 0], np.ones(ref.grid.size)]
    else:
        coefs = [-beta * Hi[0, 0], -2.0 * beta * Hi[0, 1], -beta * Hi[1, 1], np.ones(ref.grid.size)]
    return ref.grid.combine(coefs).tocsc()


class ChordCache:
    """LU factor of the Newton matrix, kept across steps.

    ``anchor`` is the exact array the factor was built from, so a resumed
    run can rebuild the identical factor from a checkpoint.
    """

    def __init__(self):
        self.lu = None
        self.anchor = None
        self.beta = None

    def refactor(self, y, ref, beta, pf=None):
        pf = pf if pf is not None else geo.hessian_field(y, ref)
        self.lu = spla.splu(_jacobian(pf, ref, beta), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0)
        self.anchor = np.array(y, copy=True)
        self.beta = beta


def implicit_step(phi, ref, dt, tol=1e-10, maxiter=40, t=None, cache=None):
    """Exponential implicit step: y = e^dt phi + (e^dt - 1)(psi(y) - h_ref).

    The +phi term is integrated exactly; the log Monge-Ampere term psi is
    taken at the new time level. The system is solved by a chord Newton
    iteration that refactors the Jacobian only when contraction is slow;
    with a ``cache`` the factor carries over between steps.
    Returns (y, PotentialField of y).
    """
    g = math.exp(dt)
    beta = math.expm1(dt)
    base = g * phi - beta * (ref.logdet0 + ref.h_ref)
    cache = cache if cache is not None else ChordCache()
    y = phi.copy()
    pf = geo.hessian_field(y, ref)
    fresh = False
    if cache.lu is None or cache.beta != beta:
        cache.refactor(y, ref, beta, pf)
        fresh = True
    prev = np.inf
    for it in range(maxiter):
        r = y - beta * pf.logdetH - base
        delta = cache.lu.solve(-r)
        size = float(np.abs(delta).max())
        lam = 1.0
        while True:
            try:
                cand = y + lam * delta
                pf_c = geo.hessian_field(cand, ref)
                break
            except AdmissibilityError as e:
                lam *= 0.5
                if lam < 1e-3:
                    if not fresh:
                        break
                    raise AdmissibilityError(f"Newton iterate lost convexity: {e}", node=e.node, t=t) from e
        if lam >= 1e-3:
            y, pf = cand, pf_c
            scale = 1.0 + float(np.abs(y).max())
            if size <= tol * scale:
                return y, pf
        if lam < 1e-3 or (size > 0.3 * prev and not fresh):
            # the carried-over factor is not good enough here: restart from phi with a fresh one
            y = phi.copy()
            pf = geo.hessian_field(y, ref)
            cache.refactor(y, ref, beta, pf)
            fresh, prev = True, np.inf
            continue
        if size > 0.3 * prev:
            if size <= 1e3 * tol * scale:
                return y, pf  # rounding floor
            cache.refactor(y, ref, beta, pf)
            size = np.inf
        prev = size
    raise NumericalError(f"Newton did not converge in {maxiter} iterations (last update {size:.2e})")


def rk4_step(phi, ref, dt):
    def f(y):
        return phidot(geo.hessian_field(y, ref), ref)

    k1 = f(phi)
    k2 = f(phi + 0.5 * dt * k1)
    k3 = f(phi + 0.5 * dt * k2)
    k4 = f(phi + dt * k3)
    y = phi + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y, geo.hessian_field(y, ref)


def growth_factor(scheme, dt):
    """Factor multiplying a constant offset over one step."""
    if scheme == "imex":
        return math.exp(dt)
    return 1.0 + dt + dt**2 / 2.0 + dt**3 / 6.0 + dt**4 / 24.0


def rk4_stable_dt(pf, ref):
    """Largest stable RK4 step for the linearised right-hand side (Gershgorin bound)."""
    J = _jacobian(pf, ref, -1.0)
    rho = float(np.abs(J).sum(axis=1).max()) + 1.0
    return 2.78 / rho


# --------------------------------------------------------------------------
# states and trajectories


@dataclass
class FlowState:
    t: float
    phi: geo.PotentialField
    phidot: np.ndarray
    snapshot: fn.FunctionalSnapshot | None = None


def init_state(config, problem=None):
    """phi(0) = perturbation + c0 for the "zero" and "mean_h" policies.

    The "bisect" constant needs the whole run; :func:`run` resolves it.
    Here it is reported as 0.
    """
    config.validate()
    problem = problem or build_problem(config)
    ref = problem.ref
    p = perturbation(problem, config.seed, config.amplitude, config.n_bumps)
    c0 = initial_constant(config.c0_policy, ref) if config.c0_policy != "bisect" else 0.0
    pf = geo.hessian_field(p + c0, ref)
    return FlowState(0.0, pf, phidot(pf, ref))


def initial_constant(policy, ref):
    if policy == "zero":
        return 0.0
    if policy == "mean_h":
        return geo.integrate(ref.h_ref, "reference", None, ref)
    raise ConfigurationError(f"policy {policy!r} has no closed-form constant", key="c0_policy")


def step(state, config, problem=None, cache=None):
    """One step of the configured scheme from ``state`` (no gauge fixing)."""
    problem = problem or build_problem(config)
    ref = problem.ref
    phi = state.phi.values
    if config.scheme == "imex":
        y, pf = implicit_step(phi, ref, config.dt, config.newton_tol, t=state.t, cache=cache)
    else:
        y, pf = rk4_step(phi, ref, config.dt)
    if config.symmetrize:
        y = geo.symmetrize(y, ref.perms)
        pf = geo.hessian_field(y, ref)
    if not np.all(np.isfinite(y)):
        raise NumericalError(f"non-finite potential at t = {state.t + config.dt}")
    return FlowState(state.t + config.dt, pf, phidot(pf, ref))


def _stats(t, pf, ref, config):
    """Gauge-free data of u at one snapshot; constants enter later."""
    u = pf.values
    x = phidot(pf, ref)
    I_meas, I_dir = fn.I_forms(pf, ref)
    h_phi, _ = geo.ricci_potential(pf, ref)
    per = est.perelman_monitor(pf, ref, config.monitor_floor)
    cp = math.nan
    if config.poincare:
        try:
            cp = est.poincare_proxy(pf, ref)
        except NumericalError:
            pass
    return {
        "t": t,
        "sup_u": float(u.max()), "inf_u": float(u.min()),
        "I_u": I_meas, "I_dirichlet": I_dir,
        "J": fn.compute_J(pf, ref), "F": fn.compute_F(pf, ref), "nu": fn.compute_nu(pf, ref, h_phi),
        "int_ref": geo.integrate(u, "reference", pf, ref), "int_ev": geo.integrate(u, "evolved", pf, ref),
        "vol_ev": geo.integrate(1.0, "evolved", pf, ref),
        "max_x": float(x.max()), "min_x": float(x.min()),
        "sup_rhs9": float((-x - ref.h_ref).max()),
        "sup_R": per.sup_R, "sup_R_dev": per.sup_R_dev, "sup_h": per.sup_h, "sup_gradh": per.sup_gradh,
        "cp_proxy": cp,
        "alpha": [fn.alpha_integral(u, ref, d) for d in config.deltas],
    }


def snapshot_from_stats(s, a):
    """FunctionalSnapshot of phi = u + a."""
    sup_phi, inf_phi = s["sup_u"] + a, s["inf_u"] + a
    int_phi_ref = s["int_ref"] + a
    return fn.FunctionalSnapshot(
        t=s["t"], sup_phi=sup_phi, inf_phi=inf_phi, osc=sup_phi - inf_phi,
        I=s["I_u"] + a * (1.0 - s["vol_ev"]), J=s["J"], F0=s["J"] - int_phi_ref, F=s["F"], nu=s["nu"],
        int_phi_ref=int_phi_ref, int_negphi_ev=-s["int_ev"] - a * s["vol_ev"],
        sup_phidot=max(abs(s["max_x"] + a), abs(s["min_x"] + a)),
        sup_R=s["sup_R"], sup_h=s["sup_h"], sup_gradh=s["sup_gradh"], cp_proxy=s["cp_proxy"],
        vol_err=abs(s["vol_ev"] - 1.0),
    )


def monitor_inputs(s, a):
    snap = snapshot_from_stats(s, a)
    bounds = est.bounds_from_stats(s["t"], snap.sup_phi, snap.inf_phi, snap.int_phi_ref, snap.int_negphi_ev,
                                   snap.I)
    return {"t": s["t"], "bounds": bounds, "sup_rhs9": s["sup_rhs9"] - a, "vol_ev": s["vol_ev"]}


@dataclass
class Trajectory:
    config: FlowConfig
    stats: list = field(default_factory=list)  # per snapshot, gauge-free
    stat_steps: list = field(default_factory=list)
    shifts: list = field(default_factory=list)  # constant removed at step k (k >= 1)
    means: list = field(default_factory=list)  # reference mean of phidot - a at step k
    history: list = field(default_factory=list)  # u at snapshot steps
    states: list = field(default_factory=list)
    c0: float = 0.0
    gauge: list = field(default_factory=list)  # a at snapshot steps
    outcome: str | None = None
    rate: float | None = None
    failure: str | None = None
    snapshots: list = field(default_factory=list)

    @property
    def times(self):
        return [s["t"] for s in self.stats]

    def set_outcome(self, outcome):
        if self.outcome is not None:
            raise RuntimeError("outcome already set")
        self.outcome = outcome

    def bounds(self):
        return [monitor_inputs(s, a)["bounds"] for s, a in zip(self.stats, self.gauge)]

    def monitor_inputs(self):
        return [monitor_inputs(s, a) for s, a in zip(self.stats, self.gauge)]

    def potentials(self):
        """phi = u + a at the snapshot steps."""
        return [u + a for u, a in zip(self.history, self.gauge)]


# --------------------------------------------------------------------------
# gauge resolution


def resolve_gauge(config, shifts, means, ref, probe_step=None):
    """Constants a_k for k = 0..K from the recorded shifts.

    zero / mean_h: forward recursion from the policy's a_0.
    bisect: a_0 is the root in [-D, D] of the reference mean of phidot at
    the probe step (monotone in a_0, since a_0 enters as g^k a_0); the
    sequence is then built backwards from the probe step and forwards
    after it.
    """
    g = growth_factor(config.scheme, config.dt)
    K = len(shifts)
    a = np.empty(K + 1)
    if config.c0_policy != "bisect":
        a[0] = initial_constant(config.c0_policy, ref)
        for k in range(1, K + 1):
            a[k] = g * a[k - 1] + shifts[k - 1]
        return float(a[0]), a
    P = K if probe_step is None else min(probe_step, K)
    # a_P = g^P (a_0 + B) with B = sum_{k <= P} g^-k s_k; the root sets a_P = -means[P]
    B = math.fsum(shifts[k - 1] * g ** (-k) for k in range(1, P + 1))
    target = means[P] * g ** (-P)

    def objective(c0):
        return c0 + B + target

    D = config.probe_range
    if objective(-D) > 0 or objective(D) < 0:
        raise ConfigurationError(f"no initial constant in [-{D}, {D}] balances the flow", key="probe_range")
    c0 = optimize.bisect(objective, -D, D, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=2000)
    # same constant, built without the cancellation in g^k (a_0 + partial sums)
    a[P] = -means[P]
    for k in range(P, 0, -1):
        a[k - 1] = (a[k] - shifts[k - 1]) / g
    for k in range(P + 1, K + 1):
        a[k] = g * a[k - 1] + shifts[k - 1]
    return float(c0), a


# --------------------------------------------------------------------------
# running


def _diverging(traj, config):
    if len(traj.stats) < 6:
        return False
    t = traj.times
    osc = [s["sup_u"] - s["inf_u"] for s in traj.stats]
    if osc[-1] <= config.divergence_osc_budget:
        return False
    slope, tail = est.trend(t, osc)
    steps = np.diff(np.asarray(osc)[tail])
    return slope > 1e-2 and steps.size > 0 and np.mean(steps > 0) >= 0.9


def fit_rate(traj, floor=1e-9):
    """Exponential rate of Osc(phi_t - phi_final) over the final third of the
    stretch where it stays above ``floor``. None if too few points."""
    if len(traj.history) < 4:
        return None
    final = traj.history[-1]
    t = np.array(traj.times[:-1])
    d = np.array([np.ptp(u - final) for u in traj.history[:-1]])
    ok = d > floor
    if ok.sum() < 3:
        return None
    t, d = t[ok], d[ok]
    window = t >= t[0] + 2.0 * (t[-1] - t[0]) / 3.0
    if window.sum() < 3:
        window = np.zeros_like(window)
        window[-3:] = True
    return float(-np.polyfit(t[window], np.log(d[window]), 1)[0])


def classify_outcome(traj, config):
    """Converged-KE / Diverged / Inconclusive (failures are set by run)."""
    if traj.failure is not None:
        return FAILED, None
    final = traj.stats[-1]
    if final["sup_h"] < config.convergence_tol and traj.times[-1] > 0:
        return CONVERGED, fit_rate(traj)
    if _diverging(traj, config):
        return DIVERGED, None
    return INCONCLUSIVE, None


def save_checkpoint(path, traj, u, step_index, problem, cache=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    geo.save_field(path, u, problem.grid)
    extra = {} if cache is None or cache.anchor is None else {"chord_anchor": cache.anchor}
    np.savez(path.with_suffix(".history.npz"), *traj.history, **extra)
    meta = {
        "t": step_index * traj.config.dt, "step": step_index, "c0_policy": traj.config.c0_policy,
        "config_hash": traj.config.hash(), "shifts": traj.shifts, "means": traj.means,
        "stat_steps": traj.stat_steps, "stats": traj.stats,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))


def load_checkpoint(path, config, problem):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta["config_hash"] != config.hash():
        raise ConfigurationError("checkpoint was written by a different configuration", key="resume")
    u, _ = geo.load_field(path, problem.grid)
    with np.load(path.with_suffix(".history.npz")) as z:
        history = [z[f"arr_{i}"] for i in range(len(z.files)) if f"arr_{i}" in z.files]
        anchor = z["chord_anchor"] if "chord_anchor" in z.files else None
    traj = Trajectory(config, stats=meta["stats"], stat_steps=meta["stat_steps"], shifts=meta["shifts"],
                      means=meta["means"], history=history)
    cache = ChordCache()
    if anchor is not None and config.scheme == "imex":
        cache.refactor(anchor, problem.ref, math.expm1(config.dt))
    return traj, u, meta["step"], cache


def run(config, resume=None, checkpoint_path=None, keep_states=False, progress=None):
    """Integrate to t_max (or until divergence is detected) and classify."""
    config.validate()
    problem = build_problem(config)
    ref = problem.ref
    K = config.steps
    if resume is not None:
        traj, u, k0, cache = load_checkpoint(resume, config, problem)
        pf = geo.hessian_field(u, ref)
    else:
        cache = ChordCache()
        traj = Trajectory(config)
        u = perturbation(problem, config.seed, config.amplitude, config.n_bumps)
        if config.symmetrize:
            u = geo.symmetrize(u, ref.perms)
        pf = geo.hessian_field(u, ref)
        k0 = 0
        traj.means.append(geo.integrate(phidot(pf, ref), "reference", pf, ref))
        traj.stats.append(_stats(0.0, pf, ref, config))
        traj.stat_steps.append(0)
        traj.history.append(u.copy())
    pin = geo.integrate(traj.history[0], "reference", None, ref)
    if config.scheme == "rk4" and K > 0 and config.dt > rk4_stable_dt(pf, ref):
        raise ConfigurationError(
            f"dt = {config.dt} exceeds the RK4 stability bound {rk4_stable_dt(pf, ref):.3e} on this grid", key="dt")
    state = FlowState(k0 * config.dt, pf, phidot(pf, ref))
    k = k0
    try:
        while k < K:
            state = step(state, config, problem, cache)
            k += 1
            t = k * config.dt
            y = state.phi.values
            s = geo.integrate(y, "reference", None, ref) - pin
            u = y - s
            state.phi.values = u  # Hessian data are unchanged by a constant
            state.phidot = state.phidot - s
            traj.shifts.append(float(s))
            traj.means.append(geo.integrate(phidot(state.phi, ref), "reference", state.phi, ref))
            if k % config.cadence == 0 or k == K:
                traj.stats.append(_stats(t, state.phi, ref, config))
                traj.stat_steps.append(k)
                traj.history.append(u.copy())
                if progress:
                    progress(traj.stats[-1])
                if config.stop_on_divergence and _diverging(traj, config):
                    break
            if checkpoint_path and config.checkpoint_every and k % config.checkpoint_every == 0 and k < K:
                save_checkpoint(checkpoint_path, traj, u, k, problem, cache)
    except (AdmissibilityError, NumericalError) as e:
        t_fail = (k + 1) * config.dt if k < K else k * config.dt
        traj.failure = f"{type(e).__name__} at t = {t_fail:.6g}: {e}"
    probe = None
    if config.probe_time is not None:
        probe = int(round(config.probe_time / config.dt))
    if traj.failure is None and traj.stat_steps[-1] != len(traj.shifts):
        # stopped between snapshots: record the last state as well
        traj.stats.append(_stats(len(traj.shifts) * config.dt, state.phi, ref, config))
        traj.stat_steps.append(len(traj.shifts))
        traj.history.append(state.phi.values.copy())
    c0, a = resolve_gauge(config, traj.shifts, traj.means, ref, probe)
    traj.c0 = c0
    traj.gauge = [float(a[k]) for k in traj.stat_steps]
    traj.snapshots = [snapshot_from_stats(s, g) for s, g in zip(traj.stats, traj.gauge)]
    if keep_states:
        for s, uu, g, snap in zip(traj.stats, traj.history, traj.gauge, traj.snapshots):
            pf = geo.hessian_field(uu + g, ref)
            traj.states.append(FlowState(s["t"], pf, phidot(pf, ref), snap))
    outcome, rate = classify_outcome(traj, config)
    traj.set_outcome(outcome)
    traj.rate = rate
    return traj


def with_overrides(config, **changes):
    names = {f.name for f in fields(FlowConfig)}
    bad = set(changes) - names
    if bad:
        raise ConfigurationError(f"unknown flow parameter(s): {sorted(bad)}", key=sorted(bad)[0])
    return replace(config, **changes).validate()
