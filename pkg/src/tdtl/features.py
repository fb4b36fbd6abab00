"""Hand-crafted face descriptors: uniform LBP region histograms and SIFT at landmarks.

LBP
    8-neighbour, radius-1 codes on integer neighbours, bit ``i`` set when the
    ``i``-th neighbour (NW, N, NE, E, SE, S, SW, W) is >= the centre. The 58
    uniform codes (<= 2 circular transitions), sorted ascending, get bins
    0..57; everything else lands in bin 58. The 1-pixel image border is
    dropped, the rest is cut into an 8x8 grid (remainders go to the last
    row/column of regions), and the 64 count histograms are concatenated
    row-major: 64 * 59 = 3776 values.

SIFT
    Upright, fixed-scale descriptors: a 16x16 window around each rounded
    landmark, central-difference gradients with clamped borders, 4x4 cells x
    8 orientation bins, linear interpolation between orientation bins,
    Gaussian spatial weight (sigma 8 px), then normalise / clip at 0.2 /
    renormalise. 68 landmarks x 128 = 8704 values.
"""
import numpy as np

from ._accel import njit, pick
from .linalg import ContractError

LBP_GRID = 8
LBP_BINS = 59
LBP_LENGTH = LBP_GRID * LBP_GRID * LBP_BINS  # 3776
SIFT_WINDOW = 16
SIFT_CELLS = 4
SIFT_ORIENTATIONS = 8
SIFT_SIGMA = 8.0
SIFT_CLIP = 0.2
SIFT_LENGTH_PER_POINT = SIFT_CELLS * SIFT_CELLS * SIFT_ORIENTATIONS  # 128
N_LANDMARKS = 68
SIFT_LENGTH = N_LANDMARKS * SIFT_LENGTH_PER_POINT  # 8704

# NW, N, NE, E, SE, S, SW, W as (dy, dx)
NEIGHBOURS = np.array([(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)],
                      dtype=np.int64)


def _transitions(code):
    bits = [(code >> i) & 1 for i in range(8)]
    return sum(bits[i] != bits[(i + 1) % 8] for i in range(8))


def _uniform_table():
    table = np.full(256, LBP_BINS - 1, dtype=np.int64)
    uniform = [c for c in range(256) if _transitions(c) <= 2]
    for b, c in enumerate(uniform):
        table[c] = b
    return table


UNIFORM_BIN = _uniform_table()


def as_gray(img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ContractError(f"expected a 2-D grey image, got shape {img.shape}")
    return img


def lbp_codes(img):
    """Raw 8-bit LBP codes of the interior pixels, shape (H-2, W-2)."""
    g = as_gray(img).astype(np.int64)
    h, w = g.shape
    centre = g[1:h - 1, 1:w - 1]
    codes = np.zeros_like(centre)
    for bit, (dy, dx) in enumerate(NEIGHBOURS):
        nb = g[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
        codes |= (nb >= centre).astype(np.int64) << bit
    return codes


def region_edges(n, parts=LBP_GRID):
    base = n // parts
    edges = [i * base for i in range(parts)] + [n]
    return np.array(edges, dtype=np.int64)


@njit
def _lbp_hist_numba(g, table, neigh, row_edges, col_edges, grid, n_bins):
    h, w = g.shape
    out = np.zeros(grid * grid * n_bins)
    ri = 0
    for y in range(1, h - 1):
        yy = y - 1
        while yy >= row_edges[ri + 1]:
            ri += 1
        ci = 0
        for x in range(1, w - 1):
            xx = x - 1
            while xx >= col_edges[ci + 1]:
                ci += 1
            c = g[y, x]
            code = 0
            for b in range(8):
                if g[y + neigh[b, 0], x + neigh[b, 1]] >= c:
                    code |= 1 << b
            out[(ri * grid + ci) * n_bins + table[code]] += 1.0
    return out


def _lbp_hist_numpy(g, table, neigh, row_edges, col_edges, grid, n_bins):
    bins = table[lbp_codes(g)]
    out = np.zeros(grid * grid * n_bins)
    for ri in range(grid):
        for ci in range(grid):
            block = bins[row_edges[ri]:row_edges[ri + 1], col_edges[ci]:col_edges[ci + 1]]
            start = (ri * grid + ci) * n_bins
            out[start:start + n_bins] = np.bincount(block.ravel(), minlength=n_bins)
    return out


_lbp_hist = pick(_lbp_hist_numba, _lbp_hist_numpy)


def lbp_u2_histogram(img):
    g = as_gray(img).astype(np.int64)
    h, w = g.shape
    if h < 16 or w < 16:
        raise ContractError(f"LBP needs an image of at least 16x16, got {w}x{h}")
    rows = region_edges(h - 2)
    cols = region_edges(w - 2)
    return _lbp_hist(np.ascontiguousarray(g), UNIFORM_BIN, NEIGHBOURS, rows, cols,
                     LBP_GRID, LBP_BINS)


# ---------------------------------------------------------------------------
# SIFT


@njit
def _clampi(v, lo, hi):
    return lo if v < lo else (hi if v > hi else v)


@njit
def _sift_raw_numba(img, centres, sigma):
    h, w = img.shape
    n = centres.shape[0]
    out = np.zeros((n, 128))
    two_pi = 2.0 * np.pi
    for k in range(n):
        cx = centres[k, 0]
        cy = centres[k, 1]
        for dy in range(-8, 8):
            for dx in range(-8, 8):
                x = _clampi(cx + dx, 0, w - 1)
                y = _clampi(cy + dy, 0, h - 1)
                gx = img[y, _clampi(x + 1, 0, w - 1)] - img[y, _clampi(x - 1, 0, w - 1)]
                gy = img[_clampi(y + 1, 0, h - 1), x] - img[_clampi(y - 1, 0, h - 1), x]
                mag = np.sqrt(gx * gx + gy * gy)
                if mag == 0.0:
                    continue
                ox = dx + 0.5
                oy = dy + 0.5
                wgt = np.exp(-(ox * ox + oy * oy) / (2.0 * sigma * sigma)) * mag
                theta = np.arctan2(gy, gx)
                if theta < 0.0:
                    theta += two_pi
                o = theta / two_pi * 8.0
                b0 = int(np.floor(o))
                frac = o - b0
                b0 = b0 % 8
                b1 = (b0 + 1) % 8
                cell = ((dy + 8) // 4) * 4 + (dx + 8) // 4
                out[k, cell * 8 + b0] += wgt * (1.0 - frac)
                out[k, cell * 8 + b1] += wgt * frac
    return out


def _sift_raw_numpy(img, centres, sigma):
    h, w = img.shape
    d = np.arange(-8, 8)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    cell = ((dy + 8) // 4) * 4 + (dx + 8) // 4
    spatial = np.exp(-((dx + 0.5) ** 2 + (dy + 0.5) ** 2) / (2.0 * sigma * sigma))
    out = np.zeros((centres.shape[0], 128))
    for k, (cx, cy) in enumerate(centres):
        x = np.clip(cx + dx, 0, w - 1)
        y = np.clip(cy + dy, 0, h - 1)
        gx = img[y, np.clip(x + 1, 0, w - 1)] - img[y, np.clip(x - 1, 0, w - 1)]
        gy = img[np.clip(y + 1, 0, h - 1), x] - img[np.clip(y - 1, 0, h - 1), x]
        mag = np.hypot(gx, gy)
        theta = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
        o = theta / (2.0 * np.pi) * 8.0
        b0 = np.floor(o).astype(np.int64)
        frac = o - b0
        b0 %= 8
        wgt = spatial * mag
        keep = mag > 0
        np.add.at(out[k], (cell * 8 + b0)[keep], (wgt * (1.0 - frac))[keep])
        np.add.at(out[k], (cell * 8 + (b0 + 1) % 8)[keep], (wgt * frac)[keep])
    return out


_sift_raw = pick(_sift_raw_numba, _sift_raw_numpy)


def normalize_descriptors(raw, clip=SIFT_CLIP):
    """Row-wise unit norm, clip at ``clip``, unit norm again; near-zero rows stay zero."""
    raw = np.asarray(raw, dtype=np.float64)
    out = np.zeros_like(raw)
    norms = np.linalg.norm(raw, axis=1)
    live = norms >= 1e-12
    v = raw[live] / norms[live, None]
    v = np.minimum(v, clip)
    out[live] = v / np.linalg.norm(v, axis=1, keepdims=True)
    return out


def landmark_centres(landmarks, shape):
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.shape != (N_LANDMARKS, 2):
        raise ContractError(f"expected 68 (x, y) landmarks, got shape {lm.shape}")
    if not np.all(np.isfinite(lm)):
        raise ContractError("landmark coordinates must be finite")
    h, w = shape
    centres = np.rint(lm).astype(np.int64)
    centres[:, 0] = np.clip(centres[:, 0], 0, w - 1)
    centres[:, 1] = np.clip(centres[:, 1], 0, h - 1)
    return centres


def sift_raw_histograms(img, landmarks):
    g = as_gray(img).astype(np.float64)
    return _sift_raw(np.ascontiguousarray(g), landmark_centres(landmarks, g.shape), SIFT_SIGMA)


def sift_at_landmarks(img, landmarks):
    return normalize_descriptors(sift_raw_histograms(img, landmarks)).ravel()
