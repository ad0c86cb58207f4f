import numpy as np
import pytest

import oracles
from conftest import CONVERGING, problem, random_potential
from krflow import estimates as est
from krflow import geometry as geo
from krflow.errors import EquivalenceViolation


def const_record(t, c):
    return est.bounds_from_stats(t, c, c, c, -c, 0.0)


def const_inputs(times, c=0.5):
    return [{"t": t, "bounds": const_record(t, c), "sup_rhs9": -c, "vol_ev": 1.0} for t in times]


# snapshot_bounds ----------------------------------------------------------------------


def test_bounds_of_zero():
    _, g, ref = problem("cp2")
    rec = est.snapshot_bounds(geo.hessian_field(np.zeros(g.size), ref), ref)
    assert np.array_equal(rec.values(), np.zeros(7))


@pytest.mark.parametrize("name", ("cp1", "blowup3"))
def test_bounds_of_positive_constant(name):
    _, g, ref = problem(name)
    c = 1.25
    rec = est.snapshot_bounds(geo.hessian_field(np.full(g.size, c), ref), ref)
    assert rec.q1 == rec.q2 == rec.q3 == c
    assert rec.q4 == pytest.approx(c, abs=1e-12)
    # the evolved mass of a constant shift equals the reference mass up to rounding
    assert rec.q5 == pytest.approx(-c, abs=1e-9)
    assert abs(rec.q6) < 1e-9 and rec.q7 == 0.0


@pytest.mark.parametrize("name", ("cp1", "cp2", "p1xp1", "blowup2"))
def test_step9_identity_for_random_potentials(name):
    _, g, ref = problem(name)
    for seed in range(3):
        pf = geo.hessian_field(random_potential(g, ref, np.random.default_rng(seed), amplitude=0.3), ref)
        rec = est.snapshot_bounds(pf, ref)
        assert rec.q5 == pytest.approx(rec.q6 - rec.q4, abs=1e-8)
        assert rec.q7 == rec.q2 - rec.q3 and rec.q1 == max(abs(rec.q2), abs(rec.q3)) and rec.q6 >= 0


# inequality_monitors ---------------------------------------------------------------


def test_constant_trajectory_monitors():
    times = np.linspace(0, 10, 21)
    rep = est.inequality_monitors(const_inputs(times), 2, alpha_hat=0.8)
    assert rep.classification == "AllBounded"
    assert not rep.violated()
    for m in rep.monitors.values():
        assert np.allclose(m.residual, m.residual[0])
        if m.calibrated:
            assert m.constant == pytest.approx(m.residual[0]) and m.stable


def test_step8_violation_is_flagged():
    times = np.linspace(0, 10, 21)
    snaps = const_inputs(times)
    snaps[5]["bounds"] = est.bounds_from_stats(times[5], 0.5, 0.4, 0.45, -0.45, 0.2)
    rep = est.inequality_monitors(snaps, 1)
    assert rep.monitors["step8"].violations == [5]


def test_calibrated_monitor_catches_late_jump():
    # still a bounded run, but q5 - n q2 leaves its burn-in calibration
    times = np.linspace(0, 10, 41)
    snaps = const_inputs(times)
    for s in snaps[20:]:
        s["bounds"] = est.bounds_from_stats(s["t"], 0.5, 0.5, 0.5, 1.0, 0.0)
    rep = est.inequality_monitors(snaps, 1)
    assert rep.classification == "AllBounded"
    assert rep.monitors["lemma_sup"].violations == list(range(20, 41))


def test_mixed_classification_raises():
    times = np.linspace(0, 30, 31)
    # oscillation grows while sup |phi| and its integrals stay flat: an inconsistent record
    recs = [est.BoundsRecord(t, 1.0, 1.0, -1.0, 0.0, 0.0, 0.0, 2.0 + 2.0 * t) for t in times]
    with pytest.raises(EquivalenceViolation):
        est.equivalence_report(recs)
    assert est.equivalence_report(recs, strict=False)[0] == "Mixed"


def test_equivalence_needs_ten_snapshots():
    with pytest.raises(ValueError):
        est.equivalence_report([const_record(t, 0.0) for t in range(9)])


def test_equivalence_of_constants():
    cls, labels = est.equivalence_report([const_record(t, 0.3) for t in range(12)])
    assert cls == "AllBounded"
    assert set(labels.values()) == {"bounded"}


def test_label_series():
    t = np.linspace(0, 30, 61)
    assert est.label_series(t, np.exp(-t)) == "bounded"
    assert est.label_series(t, 2.0 * t) == "unbounded"
    assert est.label_series(t, 0.05 * t) == "inconclusive"


# runs ---------------------------------------------------------------------------------


@pytest.mark.parametrize("name", CONVERGING)
def test_converging_runs_all_bounded(runs, name):
    traj = runs(name)
    rep = est.inequality_monitors(traj.monitor_inputs(), geo.build_model(traj.config.preset).n)
    assert rep.classification == "AllBounded"
    for key in ("step3", "step4", "step5", "step7", "step8", "step9", "step9_origin", "step9_identity"):
        assert not rep.monitors[key].violations, key
    for key in ("step2", "step6", "lemma_sup"):
        assert rep.monitors[key].stable, key


def test_blowup1_all_unbounded(runs):
    traj = runs("blowup1")
    cls, labels = est.equivalence_report(traj.bounds())
    assert cls == "AllUnbounded", labels


@pytest.mark.parametrize("name", CONVERGING + ("blowup1",))
def test_step8_and_identity_on_every_run(runs, name):
    for rec in runs(name).bounds():
        assert rec.q6 <= rec.q7 + 1e-6
        assert abs(rec.q5 - rec.q6 + rec.q4) <= 1e-8


def test_curvature_monitors_on_cp1_run(runs):
    traj = runs("cp1")
    t = np.array(traj.times)
    late = t >= 5.0  # the initial bump relaxes within a few time units
    for key in ("sup_R", "sup_h", "sup_gradh"):
        y = np.array([getattr(s, key) for s in traj.snapshots])
        assert np.all(np.isfinite(y))
        assert est.label_series(t[late], y[late]) == "bounded", key
    assert traj.snapshots[-1].sup_h < 1e-3


def test_poincare_proxy_bounded_on_runs(runs):
    for name in ("cp1", "blowup3"):
        traj = runs(name)
        y = [s.cp_proxy for s in traj.snapshots]
        assert np.all(np.isfinite(y))
        assert est.label_series(traj.times, y) == "bounded"


# perelman_monitor -----------------------------------------------------------------


@pytest.mark.parametrize("name", ("cp1", "p1xp1"))
def test_perelman_at_ke(name):
    _, g, ref = problem(name, reference="ke")
    rec = est.perelman_monitor(geo.hessian_field(np.zeros(g.size), ref), ref)
    assert rec.sup_R == pytest.approx(g.n, abs=1e-6)
    assert rec.sup_h < 1e-12
    assert rec.sup_gradh < 1e-6


@pytest.mark.parametrize("name", ("p1xp1", "cp2", "blowup3"))
def test_perelman_equivariance(name):
    _, g, ref = problem(name)
    phi = geo.gaussian_bumps(g, np.array([[0.4, -0.3]]), np.array([1.2]), np.array([0.2]))
    phi *= geo.admissible_scale(phi, ref, 0.5)
    base = est.perelman_monitor(geo.hessian_field(phi, ref), ref)
    for p in ref.perms:
        moved = est.perelman_monitor(geo.hessian_field(phi[p], ref), ref)
        assert np.allclose(moved, base, rtol=1e-9, atol=1e-12)


# poincare_proxy -----------------------------------------------------------------------


@pytest.mark.parametrize("name", ("cp1", "cp2"))
def test_eigenpair_residual(name):
    _, g, ref = problem(name)
    pf = geo.hessian_field(random_potential(g, ref, np.random.default_rng(2)), ref)
    ep = est.first_eigenpair(pf, ref)
    A = est.laplacian_operator(pf, ref)
    M = g.weights * pf.detH
    M = M / M.sum()
    r = A @ ep.vector - ep.value * ep.vector
    assert np.sqrt(M @ r**2) / np.sqrt(M @ ep.vector**2) <= 1e-8
    assert abs(M @ ep.vector) < 1e-10
    assert est.poincare_proxy(pf, ref) == pytest.approx(1 / ep.value)


def test_ke_cp1_eigenvalue_matches_dense_oracle():
    _, g, ref = problem("cp1", N=129, reference="ke")
    pf = geo.hessian_field(np.zeros(g.size), ref)
    lam = est.first_eigenpair(pf, ref).value
    oracle = oracles.dense_first_eigenvalue(est.laplacian_operator(pf, ref))
    assert lam == pytest.approx(oracle, rel=1e-6)
