"""Independent reference computations for the tests.

Nothing here calls the finite-difference machinery: derivatives come from
mpmath, integrals from scipy.integrate, eigenvalues from dense LAPACK.
"""
import mpmath as mp
import numpy as np
from scipy import integrate as qd
from scipy import linalg


def _mp_potential(points, bumps, scale):
    centers, widths, amps = bumps

    def F(*x):
        z = [mp.mpf(sum(int(u) * xi for u, xi in zip(p, x))) / scale for p in points]
        top = max(z)
        val = scale * (top + mp.log(mp.fsum(mp.exp(zi - top) for zi in z)))
        for c, w, a in zip(centers, widths, amps):
            val += a * mp.exp(-mp.fsum((xi - ci) ** 2 for xi, ci in zip(x, c)) / (2 * mp.mpf(w) ** 2))
        return val

    return F


def curvature_oracle(points, bumps, x, scale=1, dps=30):
    """(R, log det H) of F0 + bumps at points x (n, m).

    Partial derivatives of F up to order 4 come from mpmath's
    high-precision numerical differentiation; R = -tr(H^-1 D^2 log det H)
    is then assembled node by node with dense algebra, using
    d_k d_l log det H = tr(H^-1 H_kl) - tr(H^-1 H_k H^-1 H_l).
    ``points`` are integer tuples; ``bumps`` is (centers, widths, amplitudes).
    """
    n, m = x.shape
    F = _mp_potential(points, bumps, scale)
    r = range(n)
    R = np.empty(m)
    logdet = np.empty(m)
    with mp.workdps(dps):
        for j in range(m):
            at = [mp.mpf(float(v)) for v in x[:, j]]
            cache = {}

            def D(*idx):
                key = tuple(sorted(idx))
                if key not in cache:
                    orders = [key.count(i) for i in r]
                    cache[key] = mp.diff(F, at, orders) if n > 1 else mp.diff(F, at[0], orders[0])
                return cache[key]

            H = mp.matrix([[D(a, b) for b in r] for a in r])
            Hi = H ** -1
            Hk = [mp.matrix([[D(a, b, k) for b in r] for a in r]) for k in r]
            D2 = mp.matrix(n, n)
            for k in r:
                for l in r:
                    Hkl = mp.matrix([[D(a, b, k, l) for b in r] for a in r])
                    A = Hi * Hkl
                    B = Hi * Hk[k] * Hi * Hk[l]
                    D2[k, l] = sum(A[i, i] - B[i, i] for i in r)
            T = Hi * D2
            R[j] = float(-sum(T[i, i] for i in r))
            logdet[j] = float(mp.log(mp.det(H)))
    return R, logdet


def dense_grad_form(grad, H):
    """g^T H^-1 g node by node with numpy.linalg.solve."""
    out = np.empty(grad.shape[1])
    for m in range(grad.shape[1]):
        out[m] = grad[:, m] @ np.linalg.solve(H[:, :, m], grad[:, m])
    return out


def dense_first_eigenvalue(A):
    """Smallest nonzero eigenvalue of A by a dense general eigensolve.

    The finite-difference operator is self-adjoint only up to truncation,
    so no symmetrization is applied.
    """
    ev = linalg.eigvals(A.toarray())
    ev = ev[np.argsort(np.abs(ev))]
    return float(ev[1].real)


def cp1_alpha_family(delta, s):
    """(1/V) int e^{-delta(phi_s - sup phi_s)} F0'' dx over the whole line, for
    phi_s = -s log(e^x + e^-x) and F0 = log(e^-x + 1 + e^x); V = 2."""

    def integrand(x):
        q = np.exp(-x)
        lse = x + np.log1p(q * q)
        log_det0 = -x + np.log1p(4 * q + q * q) - 2.0 * np.log1p(q + q * q)
        return np.exp(delta * s * (lse - np.log(2.0)) + log_det0)

    # even integrand; 2 * int_0^inf / V
    return qd.quad(integrand, 0.0, np.inf, limit=500)[0]


def cp1_alpha_oracle(deltas, budget, s_values=(0.5, 0.9, 0.99, 1.0)):
    """Largest delta whose sup over the family stays within budget.

    The integral increases with s, so its sup is the s -> 1 limit, which
    diverges for delta >= 1 (the integrand tends to e^{(delta - 1)|x|}).
    """
    best = 0.0
    for d in deltas:
        if d >= 1.0:
            break
        if max(cp1_alpha_family(d, s) for s in s_values) > budget:
            break
        best = d
    return best
