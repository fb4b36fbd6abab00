"""Small dense linear algebra used by every other module.

Matrices are plain 2-D float64 numpy arrays. Products go through numpy/BLAS;
the symmetric eigensolver is a cyclic Jacobi iteration with a numba kernel
and a numpy twin (see :mod:`tdtl._accel`).
"""
import logging
from typing import NamedTuple

import numpy as np

from ._accel import njit, pick

log = logging.getLogger(__name__)

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-10


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


class EigenDecomposition(NamedTuple):
    values: np.ndarray   # descending
    vectors: np.ndarray  # columns are eigenvectors


class SvdResult(NamedTuple):
    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name} has non-finite entries")
    return a


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# cyclic Jacobi


@njit
def _jacobi_numba(a, tol, max_sweeps):
    n = a.shape[0]
    v = np.eye(n)
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale += a[i, j] * a[i, j]
    scale = np.sqrt(scale)
    sweeps = 0
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += 2.0 * a[i, j] * a[i, j]
        if np.sqrt(off) <= tol * scale or off == 0.0:
            break
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    return w, v, sweeps


def _jacobi_numpy(a, tol, max_sweeps):
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    iu = np.triu_indices(n, 1)
    sweeps = 0
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(a[iu] ** 2))
        if off <= tol * scale or off == 0.0:
            break
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                colp = a[:, p].copy()
                colq = a[:, q]
                a[:, p] = c * colp - s * colq
                a[:, q] = s * colp + c * colq
                rowp = a[p, :].copy()
                rowq = a[q, :]
                a[p, :] = c * rowp - s * rowq
                a[q, :] = s * rowp + c * rowq
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v, sweeps


_jacobi = pick(_jacobi_numba, _jacobi_numpy)


def _fix_signs(vectors):
    # largest-magnitude entry of every column made positive
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sym_eig(a, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Full eigendecomposition of a symmetric matrix, eigenvalues descending.

    Eigenvector signs are fixed so the largest-magnitude entry of each
    column is positive, which makes the result a deterministic function of
    ``a``.
    """
    a = as_matrix(a, "a")
    n, m = a.shape
    if n != m:
        raise ContractError(f"sym_eig needs a square matrix, got {a.shape}")
    if n and np.max(np.abs(a - a.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(a))):
        raise ContractError("sym_eig needs a symmetric matrix")
    work = np.ascontiguousarray(0.5 * (a + a.T))
    w, v, sweeps = _jacobi(work, tol, max_sweeps)
    if sweeps >= max_sweeps:
        log.warning("Jacobi hit the sweep limit (%d) on a %dx%d matrix", max_sweeps, n, n)
    order = np.argsort(-w, kind="stable")
    return EigenDecomposition(w[order], _fix_signs(v[:, order]))


def _complete_basis(q, n_total):
    """Extend orthonormal columns ``q`` (D x k) to ``n_total`` orthonormal columns."""
    d = q.shape[0]
    cols = [q[:, i] for i in range(q.shape[1])]
    for e in np.eye(d):
        if len(cols) == n_total:
            break
        r = e.copy()
        for _ in range(2):
            for c in cols:
                r -= (c @ r) * c
        nrm = np.linalg.norm(r)
        if nrm > 1e-6:
            cols.append(r / nrm)
    return np.column_stack(cols) if cols else np.zeros((d, 0))


def _svd_tall(a):
    m, n = a.shape
    eig = sym_eig(a.T @ a)
    s = np.sqrt(np.clip(eig.values, 0.0, None))
    v = eig.vectors
    # eig(A^T A) resolves singular values only down to ~sqrt(eps) * s_max
    tol = np.sqrt(max(m, n) * np.finfo(float).eps) * (s[0] if n else 0.0)
    good = s > max(tol, 1e-300)
    k = int(np.sum(good))
    s[~good] = 0.0
    u = _orthonormalize((a @ v[:, :k]) / s[:k])
    if k < n:
        # zero singular values sit at the end; any orthonormal completion works
        u = _complete_basis(u, n)
    return u, s, v


def _orthonormalize(q):
    # two passes of Gram-Schmidt; cleans up rounding in A v / s for small s
    q = q.copy()
    for j in range(q.shape[1]):
        for _ in range(2):
            q[:, j] -= q[:, :j] @ (q[:, :j].T @ q[:, j])
        q[:, j] /= np.linalg.norm(q[:, j])
    return q


def svd(a):
    """Thin SVD built on :func:`sym_eig` of the Gram matrix.

    Sign convention: the largest-magnitude entry of each column of ``u`` is
    positive; ``v`` is flipped to match.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if m >= n:
        u, s, v = _svd_tall(a)
    else:
        v, s, u = _svd_tall(a.T)
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return SvdResult(u * signs, s, v * signs)


def pca_basis(x, d):
    """Top-``d`` principal directions of mean-centred rows of ``x`` (D x d)."""
    x = as_matrix(x, "x")
    n, dim = x.shape
    if n < 2:
        raise ContractError("pca_basis needs at least two samples")
    if not 1 <= d <= min(n - 1, dim):
        raise ContractError(f"pca dimension {d} outside [1, {min(n - 1, dim)}]")
    xc = x - x.mean(axis=0)
    if dim <= n:
        eig = sym_eig(xc.T @ xc)
        basis = eig.vectors[:, :d]
        values = eig.values[:d]
    else:
        # Gram trick: eigenvectors of xc xc^T mapped back through xc^T
        eig = sym_eig(xc @ xc.T)
        values = eig.values[:d]
        keep = values > 1e-12 * max(eig.values[0], 1e-300)
        basis = np.zeros((dim, d))
        basis[:, keep] = (xc.T @ eig.vectors[:, :d][:, keep]) / np.sqrt(values[keep])
        values = np.where(keep, values, 0.0)
    scale = max(values[0], 1e-300) if d else 1.0
    flat = values <= 1e-12 * scale
    if np.any(flat):
        log.warning("pca_basis: %d zero-variance direction(s) padded with an arbitrary complement",
                    int(np.sum(flat)))
        basis = _complete_basis(basis[:, ~flat], d)
    return _fix_signs(basis)


def centering_matrix(n):
    if n < 1:
        raise ContractError("centering matrix needs n >= 1")
    return np.eye(n) - np.full((n, n), 1.0 / n)


def soft_threshold(x, tau):
    """Proximal operator of ``tau * |.|``; works elementwise on arrays too."""
    if np.any(np.asarray(tau) < 0):
        raise ContractError("soft-threshold level must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)
    return float(out) if out.ndim == 0 else out
