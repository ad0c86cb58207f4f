"""Pure-NumPy fallback for the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def pairwise_sum(a):
    buf = np.array(a, dtype=np.float64, copy=True).ravel()
    if buf.size == 0:
        return 0.0
    while buf.size > 1:
        m = buf.size // 2
        head = buf[0:2 * m:2] + buf[1:2 * m:2]
        if buf.size % 2:
            head = np.append(head, buf[-1])
        buf = head
    return float(buf[0])


def sym2_inverse(a11, a12, a22, given=None):
    det = a11 * a22 - a12 * a12 if given is None else np.array(given, dtype=np.float64)
    ok = (det > 0.0) & (a11 > 0.0)
    bad = -1 if ok.all() else int(np.argmin(ok))
    with np.errstate(divide="ignore", invalid="ignore"):
        logdet = np.where(ok, np.log(np.where(ok, det, 1.0)), np.nan)
        i11 = np.where(ok, a22 / det, np.nan)
        i12 = np.where(ok, -a12 / det, np.nan)
        i22 = np.where(ok, a11 / det, np.nan)
    return det, logdet, i11, i12, i22, bad


def row_scaled_sum(coefs, data, indptr):
    """sum_k coefs[k, row] * data[k] over the entries of a shared CSR pattern."""
    rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    return np.einsum("ke,ke->e", coefs[:, rows], data)


def centred_matvec(data, indices, indptr, f):
    """sum_j A_ij (f_j - f_i) per row of a CSR matrix."""
    rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    return np.bincount(rows, weights=data * (f[indices] - f[rows]), minlength=len(indptr) - 1)
