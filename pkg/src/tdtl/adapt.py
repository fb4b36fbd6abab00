"""Baseline domain adaptation: subspace alignment, geodesic flow kernel, TCA.

Each method maps source and target features into a shared space; a
1-nearest-neighbour classifier trained on the mapped source then labels the
mapped target. ``sweep`` runs a method over its parameter grid.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import metrics
from ._accel import njit, pick
from .linalg import ContractError, ShapeError, as_matrix, pca_basis, svd, sym_eig

log = logging.getLogger(__name__)

THETA_EPS = 1e-8
TCA_RIDGE = 1e-8
TCA_MAX_CONDITION = 1e14

SA_GRID = tuple(range(1, 301))
GFK_GRID = tuple(range(10, 101, 10))
TCA_GRID = tuple(float(mu) for mu in range(1, 301))
TCA_DIM = 8


class NumericError(RuntimeError):
    pass


class InfeasibleGrid(ValueError):
    pass


@dataclass
class Subspace:
    basis: np.ndarray  # D x d, orthonormal columns

    @property
    def dim(self):
        return self.basis.shape[1]


@dataclass
class GeodesicKernel:
    g: np.ndarray

    def similarity(self, x, z):
        return np.asarray(x) @ self.g @ np.asarray(z).T


class SaModel(NamedTuple):
    ps: Subspace
    pt: Subspace
    m: np.ndarray
    source_mean: np.ndarray
    target_mean: np.ndarray


def _means(xs, xt, center):
    if not center:
        return np.zeros(xs.shape[1]), np.zeros(xt.shape[1])
    return xs.mean(axis=0), xt.mean(axis=0)


def sa_fit(xs, xt, d, center=True):
    xs = as_matrix(xs, "xs")
    xt = as_matrix(xt, "xt")
    if xs.shape[1] != xt.shape[1]:
        raise ShapeError(f"source has {xs.shape[1]} features, target {xt.shape[1]}")
    ps = pca_basis(xs, d)
    pt = pca_basis(xt, d)
    return SaModel(Subspace(ps), Subspace(pt), ps.T @ pt, *_means(xs, xt, center))


def sa_transform(model, xs, xt):
    """Aligned source coordinates ``xs Ps M`` and target coordinates ``xt Pt``."""
    zs = (np.asarray(xs) - model.source_mean) @ model.ps.basis @ model.m
    zt = (np.asarray(xt) - model.target_mean) @ model.pt.basis
    return zs, zt


# ---------------------------------------------------------------------------
# geodesic flow kernel


def gfk_coefficients(theta):
    """Integrated path weights for principal angles ``theta``; zero-angle limits applied."""
    theta = np.asarray(theta, dtype=np.float64)
    small = theta < THETA_EPS
    t = np.where(small, 1.0, theta)
    l1 = np.where(small, 2.0, 1.0 + np.sin(2 * t) / (2 * t))
    l2 = np.where(small, 0.0, (np.cos(2 * t) - 1.0) / (2 * t))
    l3 = np.where(small, 0.0, 1.0 - np.sin(2 * t) / (2 * t))
    return l1, l2, l3


def _gfk_parts(ps, pt):
    ps = ps.basis if isinstance(ps, Subspace) else np.asarray(ps)
    pt = pt.basis if isinstance(pt, Subspace) else np.asarray(pt)
    if ps.shape != pt.shape:
        raise ContractError(f"subspaces differ in shape: {ps.shape} vs {pt.shape}")
    dim, d = ps.shape
    if d >= dim:
        raise ContractError("GFK needs d < D so the source subspace has a complement")
    r = svd(ps.T @ pt)
    gamma = np.clip(r.singular_values, -1.0, 1.0)
    theta = np.arccos(gamma)
    a = ps @ r.u
    # complement part R_s U_2 = -(I - Ps Ps^T) Pt V / sin(theta); no explicit complement basis
    resid = pt @ r.v - ps @ (ps.T @ (pt @ r.v))
    sin = np.sin(theta)
    b = np.zeros_like(resid)
    live = theta >= THETA_EPS
    b[:, live] = -resid[:, live] / sin[live]
    return a, b, gfk_coefficients(theta)


def gfk_factor(ps, pt):
    """``L`` (D x 2d) with ``G = L L^T``; distances under G are Euclidean on ``x L``."""
    a, b, (l1, l2, l3) = _gfk_parts(ps, pt)
    cols_a, cols_b = [], []
    # each 2x2 block [[l1, l2], [l2, l3]] is PSD; split it with its own eigendecomposition
    for i in range(a.shape[1]):
        block = np.array([[l1[i], l2[i]], [l2[i], l3[i]]])
        vals, vecs = np.linalg.eigh(block)
        root = vecs * np.sqrt(np.clip(vals, 0.0, None))
        cols_a.append(a[:, i:i + 1] * root[0] + b[:, i:i + 1] * root[1])
    return np.hstack(cols_a) if cols_a else np.zeros((a.shape[0], 0))


def gfk_fit(ps, pt):
    a, b, (l1, l2, l3) = _gfk_parts(ps, pt)
    g = (a * l1) @ a.T + (a * l2) @ b.T + (b * l2) @ a.T + (b * l3) @ b.T
    return GeodesicKernel(0.5 * (g + g.T))


def gfk_fit_explicit(ps, pt):
    """Reference construction through an explicit orthogonal complement of ``ps``.

    Complement vectors are the eigenvectors of ``I - Ps Ps^T`` with eigenvalue
    above 0.5. Quadratic in D; used to cross-check :func:`gfk_fit`.
    """
    ps = ps.basis if isinstance(ps, Subspace) else np.asarray(ps)
    pt = pt.basis if isinstance(pt, Subspace) else np.asarray(pt)
    dim, d = ps.shape
    if d >= dim:
        raise ContractError("GFK needs d < D so the source subspace has a complement")
    eig = sym_eig(np.eye(dim) - ps @ ps.T)
    rs = eig.vectors[:, eig.values > 0.5]
    r = svd(ps.T @ pt)
    theta = np.arccos(np.clip(r.singular_values, -1.0, 1.0))
    a = ps @ r.u
    proj = rs.T @ pt @ r.v  # = -U2 diag(sin theta)
    u2 = np.zeros((rs.shape[1], d))
    live = theta >= THETA_EPS
    u2[:, live] = -proj[:, live] / np.sin(theta[live])
    b = rs @ u2
    l1, l2, l3 = gfk_coefficients(theta)
    g = (a * l1) @ a.T + (a * l2) @ b.T + (b * l2) @ a.T + (b * l3) @ b.T
    return GeodesicKernel(0.5 * (g + g.T))


# ---------------------------------------------------------------------------
# transfer component analysis


@dataclass
class TcaModel:
    mu: float
    n_source: int
    n_target: int
    projection: np.ndarray  # D x m; linear kernel, so new points embed as z @ projection
    embedding: np.ndarray  # (Ns + Nt) x m, equals K W
    eigenvalues: np.ndarray

    @property
    def dim(self):
        return self.projection.shape[1]

    def transform(self, x):
        return np.asarray(x) @ self.projection


def mmd_matrix(ns, nt):
    e = np.concatenate([np.full(ns, 1.0 / ns), np.full(nt, -1.0 / nt)])
    return np.outer(e, e)


def _inv_sqrt(a, what):
    eig = sym_eig(a)
    vals = eig.values
    if vals[-1] <= 0 or vals[0] / vals[-1] > TCA_MAX_CONDITION:
        cond = np.inf if vals[-1] <= 0 else vals[0] / vals[-1]
        raise NumericError(f"{what} is singular (condition estimate {cond:.3e})")
    return (eig.vectors / np.sqrt(vals)) @ eig.vectors.T


def _top_general(top, bottom, m):
    """Top-m solutions of ``top w = lam bottom w`` with ``w^T bottom w = 1``."""
    half = _inv_sqrt(bottom, "TCA left operand")
    eig = sym_eig(half @ top @ half)
    return eig.values[:m], half @ eig.vectors[:, :m]


def _tca_dual(x, ns, nt, mu, m):
    n = ns + nt
    k = x @ x.T
    l = mmd_matrix(ns, nt)
    h = np.eye(n) - np.full((n, n), 1.0 / n)
    left = k @ l @ k + mu * np.eye(n)
    left += TCA_RIDGE * np.trace(left) * np.eye(n)
    vals, w = _top_general(k @ h @ k, left, m)
    return vals, x.T @ w


def _tca_primal(x, ns, nt, mu, m):
    # linear kernel: every eigenvector with nonzero eigenvalue is w = X a, which turns the
    # N x N problem into a D x D one in b = S^(1/2) a, S = X^T X
    s_eig = sym_eig(x.T @ x)
    s_half = (s_eig.vectors * np.sqrt(np.clip(s_eig.values, 0.0, None))) @ s_eig.vectors.T
    e = np.concatenate([np.full(ns, 1.0 / ns), np.full(nt, -1.0 / nt)])
    xe = x.T @ e
    xc = x - x.mean(axis=0)
    top = s_half @ (xc.T @ xc) @ s_half
    dim = x.shape[1]
    left = s_half @ np.outer(xe, xe) @ s_half + mu * np.eye(dim)
    left += TCA_RIDGE * np.trace(left) * np.eye(dim)
    vals, b = _top_general(top, left, m)
    return vals, s_half @ b


def tca_fit(xs, xt, mu, m=TCA_DIM, solver="auto"):
    """Linear-kernel TCA on the stacked data.

    ``solver="dual"`` works with the (Ns+Nt) x (Ns+Nt) kernel exactly as
    written; ``"primal"`` uses the equivalent D x D problem, which is far
    cheaper when D is small and X^T X is well conditioned. ``"auto"`` picks.
    """
    xs = as_matrix(xs, "xs")
    xt = as_matrix(xt, "xt")
    if xs.shape[1] != xt.shape[1]:
        raise ShapeError(f"source has {xs.shape[1]} features, target {xt.shape[1]}")
    if mu <= 0:
        raise ContractError("mu must be positive")
    ns, nt = xs.shape[0], xt.shape[0]
    if not 1 <= m <= ns + nt:
        raise ContractError(f"embedding dimension {m} outside [1, {ns + nt}]")
    x = np.vstack([xs, xt])
    if solver == "auto":
        solver = "dual"
        if x.shape[1] < x.shape[0]:
            vals = sym_eig(x.T @ x).values
            if vals[-1] > 1e-12 * vals[0]:
                solver = "primal"
    if solver == "primal":
        if m > x.shape[1]:
            raise ContractError(f"primal TCA gives at most {x.shape[1]} components")
        vals, proj = _tca_primal(x, ns, nt, mu, m)
    elif solver == "dual":
        vals, proj = _tca_dual(x, ns, nt, mu, m)
    else:
        raise ValueError(f"unknown TCA solver {solver!r}")
    return TcaModel(float(mu), ns, nt, proj, x @ proj, vals)


def mean_discrepancy(zs, zt):
    return float(np.linalg.norm(np.mean(zs, axis=0) - np.mean(zt, axis=0)))


# ---------------------------------------------------------------------------
# 1-NN


@njit
def _nn1_numba(train, test):
    n_test = test.shape[0]
    n_train, dim = train.shape
    out = np.empty(n_test, dtype=np.int64)
    for i in range(n_test):
        best = np.inf
        arg = 0
        for j in range(n_train):
            d = 0.0
            for k in range(dim):
                t = test[i, k] - train[j, k]
                d += t * t
            if d < best:
                best = d
                arg = j
        out[i] = arg
    return out


def _nn1_numpy(train, test, chunk_bytes=1 << 25):
    out = np.empty(test.shape[0], dtype=np.int64)
    rows = max(1, chunk_bytes // (8 * max(1, train.size)))
    for start in range(0, test.shape[0], rows):
        block = test[start:start + rows]
        diff = block[:, None, :] - train[None, :, :]
        # summing in coordinate order keeps ties identical to the compiled kernel
        d = np.zeros((block.shape[0], train.shape[0]))
        for k in range(train.shape[1]):
            d += diff[:, :, k] * diff[:, :, k]
        out[start:start + rows] = np.argmin(d, axis=1)
    return out


_nn1 = pick(_nn1_numba, _nn1_numpy)


def nn1_indices(train_feats, test_feats):
    train = as_matrix(train_feats, "train_feats")
    test = as_matrix(test_feats, "test_feats")
    if train.shape[0] == 0:
        raise ContractError("1-NN needs at least one training point")
    if train.shape[1] != test.shape[1]:
        raise ShapeError(f"train has {train.shape[1]} features, test {test.shape[1]}")
    return _nn1(np.ascontiguousarray(train), np.ascontiguousarray(test))


def nn1_classify(train_feats, train_labels, test_feats):
    """Label of the Euclidean nearest training point; ties go to the lower index."""
    labels = np.asarray(train_labels)
    return labels[nn1_indices(train_feats, test_feats)]


# ---------------------------------------------------------------------------
# parameter sweeps


def max_subspace_dim(xs, xt):
    return min(xs.shape[0] - 1, xt.shape[0] - 1, xs.shape[1])


def clip_grid(method, grid, xs, xt, tca_dim=TCA_DIM):
    grid = list(grid)
    if method == "sa":
        hi = max_subspace_dim(xs, xt)
        kept = [d for d in grid if 1 <= d <= hi]
    elif method == "gfk":
        hi = min(max_subspace_dim(xs, xt), xs.shape[1] - 1)
        kept = [d for d in grid if 1 <= d <= hi]
    elif method == "tca":
        kept = [mu for mu in grid if mu > 0]
    else:
        raise ValueError(f"unknown method {method!r}")
    if len(kept) < len(grid):
        log.warning("%s: %d of %d grid values dropped as infeasible for this data",
                    method, len(grid) - len(kept), len(grid))
    if not kept:
        raise InfeasibleGrid(f"{method}: no feasible grid value left after rank clipping")
    return kept


def adapt_features(method, value, xs, xt, tca_dim=TCA_DIM):
    """Map both domains with one method at one parameter value."""
    if method == "sa":
        return sa_transform(sa_fit(xs, xt, int(value)), xs, xt)
    if method == "gfk":
        xs_c = xs - xs.mean(axis=0)
        xt_c = xt - xt.mean(axis=0)
        f = gfk_factor(pca_basis(xs, int(value)), pca_basis(xt, int(value)))
        return xs_c @ f, xt_c @ f
    if method == "tca":
        model = tca_fit(xs, xt, float(value), min(tca_dim, xs.shape[1], xs.shape[0] + xt.shape[0]))
        return model.embedding[:xs.shape[0]], model.embedding[xs.shape[0]:]
    raise ValueError(f"unknown method {method!r}")


PARAM_NAMES = {"sa": "d", "gfk": "d", "tca": "mu"}
DEFAULT_GRIDS = {"sa": SA_GRID, "gfk": GFK_GRID, "tca": TCA_GRID}


def sweep(method, xs, ys, xt, yt, grid=None, n_classes=None, tca_dim=TCA_DIM):
    """Evaluate a method over its (rank-clipped) grid.

    Returns rows of ``(method, param, value, accuracy, f1_macro)`` in grid order.
    """
    xs = as_matrix(xs, "xs")
    xt = as_matrix(xt, "xt")
    ys = np.asarray(ys)
    yt = np.asarray(yt)
    if n_classes is None:
        n_classes = int(max(ys.max(), yt.max())) + 1
    grid = clip_grid(method, DEFAULT_GRIDS[method] if grid is None else grid, xs, xt, tca_dim)
    rows = []
    for value in grid:
        zs, zt = adapt_features(method, value, xs, xt, tca_dim)
        pred = nn1_classify(zs, ys, zt)
        rows.append((method, PARAM_NAMES[method], value, metrics.accuracy(pred, yt),
                     metrics.f1_macro(pred, yt, n_classes)))
    return rows


def best_row(rows):
    """Highest accuracy; the earliest grid value wins ties."""
    return max(rows, key=lambda r: r[3]) if rows else None
