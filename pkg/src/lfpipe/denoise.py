"""Light field denoising with disparity-compensated 4D patches.

Each reference patch of a window's reference view is paired with the patches
at the same scene point in every other view of an angular window (a 4D
patch), stacked with its most similar neighbours along a fifth axis, and
filtered by hard thresholding in a separable transform domain: 2D DCT over
the pixels, 2D DCT over the views, 1D Haar over the similar patches.
Overlapping estimates are blended with per-stack weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.fft import dctn, idctn

from .core import LightField

logger = logging.getLogger(__name__)

# orthonormal luminance / chrominance basis; iid RGB noise stays iid with equal sigma
OPPONENT = np.array([
    [1, 1, 1],
    [1, 0, -1],
    [1, -2, 1],
]) / np.sqrt([[3.0], [2.0], [6.0]])


class Stage(str, Enum):
    HARD_ONLY = "hard"
    HARD_PLUS_WIENER = "hard+wiener"


class PatchOutOfBounds(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class DenoiseParams:
    patch_size: int = 8
    angular_window: int = 5
    num_similar: int = 8
    search_radius: int = 16
    disparity_range: float = 2.0
    disparity_step: float = 0.5
    hard_threshold: float = 2.7
    sigma: float | None = None  # None: estimate from the centre view
    stage: Stage = Stage.HARD_ONLY
    chunk: int = 32

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        if not _is_pow2(self.patch_size) or self.patch_size < 2:
            raise ValueError("patch_size must be a power of two >= 2")
        if not _is_pow2(self.num_similar):
            raise ValueError("num_similar must be a power of two")
        if self.angular_window < 1 or self.search_radius < 0:
            raise ValueError("angular_window must be >= 1 and search_radius >= 0")
        if self.disparity_step <= 0 or self.disparity_range < 0:
            raise ValueError("invalid disparity range or step")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    def disparities(self) -> np.ndarray:
        """Candidate disparities, zero first, then by increasing magnitude (negative first)."""
        n = int(np.floor(self.disparity_range / self.disparity_step + 1e-9))
        d = np.arange(-n, n + 1) * self.disparity_step
        return d[np.lexsort((d, np.abs(d)))]


@dataclass
class PatchStack5D:
    """Similar 4D patches: ``data`` is (N_s, U_w, V_w, P, P, C)."""

    data: np.ndarray
    origins: np.ndarray  # (N_s, 2) top-left (x, y) in the reference view
    disparities: np.ndarray  # (N_s,)
    views: tuple = field(default=())

    def __post_init__(self):
        if self.data.ndim != 6:
            raise ValueError("stack data must be (N_s, U_w, V_w, P, P, C)")


# ---------------------------------------------------------------- transforms

def haar_matrix(n: int) -> np.ndarray:
    """Orthonormal Haar analysis matrix of size n (a power of two)."""
    if not _is_pow2(n):
        raise ValueError("Haar size must be a power of two")
    h = np.ones((1, 1))
    while h.shape[0] < n:
        m = h.shape[0]
        h = np.vstack([np.kron(h, [1.0, 1.0]), np.kron(np.eye(m), [1.0, -1.0])]) / np.sqrt(2.0)
    return h


def forward_5d(data: np.ndarray) -> np.ndarray:
    """Transform (..., N, U, V, P, P, C) stacks; the cascade is orthonormal."""
    nd = data.ndim
    ax = nd - 6
    c = dctn(data, axes=(ax + 3, ax + 4), norm="ortho")
    c = dctn(c, axes=(ax + 1, ax + 2), norm="ortho")
    return np.moveaxis(np.tensordot(haar_matrix(data.shape[ax]), c, axes=([1], [ax])), 0, ax)


def inverse_5d(coef: np.ndarray) -> np.ndarray:
    ax = coef.ndim - 6
    c = np.moveaxis(np.tensordot(haar_matrix(coef.shape[ax]).T, coef, axes=([1], [ax])), 0, ax)
    c = idctn(c, axes=(ax + 1, ax + 2), norm="ortho")
    return idctn(c, axes=(ax + 3, ax + 4), norm="ortho")


def _hard_threshold(data: np.ndarray, sigma: float, lam: float):
    """Batched hard thresholding of (B, N, U, V, P, P, C) stacks; returns (filtered, weights (B, C))."""
    coef = forward_5d(data)
    keep = np.abs(coef) >= lam * sigma
    keep[:, 0, 0, 0, 0, 0, :] = True
    coef = np.where(keep, coef, 0.0)
    retained = keep.sum(axis=(1, 2, 3, 4, 5))
    return inverse_5d(coef), 1.0 / (1.0 + retained * sigma**2)


def _wiener(data: np.ndarray, pilot: np.ndarray, sigma: float):
    cp = forward_5d(pilot)
    shrink = cp**2 / (cp**2 + sigma**2)
    out = inverse_5d(forward_5d(data) * shrink)
    return out, 1.0 / (1.0 + sigma**2 * (shrink**2).sum(axis=(1, 2, 3, 4, 5)))


def filter_stack(stack: PatchStack5D, sigma: float, lam: float = 2.7):
    """Hard-threshold one stack; returns the filtered stack and its per-channel weights."""
    out, w = _hard_threshold(stack.data[None], sigma, lam)
    return PatchStack5D(out[0], stack.origins, stack.disparities, stack.views), w[0]


# ------------------------------------------------------------- patch building

def _window_reference(valid: np.ndarray, rows, cols) -> tuple[int, int]:
    """Valid view nearest the window centre (ties: first in scan order)."""
    cu, cv = (rows[0] + rows[-1]) / 2.0, (cols[0] + cols[-1]) / 2.0
    best = None
    for u in rows:
        for v in cols:
            if valid[u, v]:
                key = ((u - cu) ** 2 + (v - cv) ** 2, u, v)
                if best is None or key < best:
                    best = key
    if best is None:
        raise PatchOutOfBounds("angular window holds no valid view")
    return best[1], best[2]


def _bilinear_patch(img: np.ndarray, x0: float, y0: float, p: int) -> np.ndarray:
    h, w = img.shape[:2]
    if x0 < 0 or y0 < 0 or x0 + p - 1 > w - 1 or y0 + p - 1 > h - 1:
        raise PatchOutOfBounds(f"patch at ({x0}, {y0}) leaves the {w}x{h} view")
    ix, iy = int(np.floor(x0)), int(np.floor(y0))
    fx, fy = x0 - ix, y0 - iy
    x1, y1 = min(ix + 1, w - p), min(iy + 1, h - p)
    a = img[iy:iy + p, ix:ix + p]
    b = img[iy:iy + p, x1:x1 + p]
    c = img[y1:y1 + p, ix:ix + p]
    d = img[y1:y1 + p, x1:x1 + p]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def build_4d_patch(lf: LightField, view_window, ref_pos, disparity: float, patch_size: int = 8,
                   interp: str = "bilinear") -> np.ndarray:
    """Extract the (U_w, V_w, P, P, C) patch following the given disparity.

    ``view_window`` is a pair of (rows, cols) view index sequences. ``ref_pos``
    is the top-left (x, y) of the patch in the window's reference view; each
    other view is sampled at ``ref_pos + disparity * (v - v_r, u - u_r)``.
    """
    rows, cols = (list(r) for r in view_window)
    ur, vr = _window_reference(lf.valid, rows, cols)
    x, y = ref_pos
    out = np.empty((len(rows), len(cols), patch_size, patch_size, lf.channels))
    for i, u in enumerate(rows):
        for j, v in enumerate(cols):
            px, py = x + disparity * (v - vr), y + disparity * (u - ur)
            if interp == "nearest":
                px, py = np.floor(px + 0.5), np.floor(py + 0.5)
            elif interp != "bilinear":
                raise ValueError(f"unknown interpolation {interp!r}")
            out[i, j] = _bilinear_patch(lf.views[u, v], px, py, patch_size)
    return out


def select_disparity(lf: LightField, view_window, ref_pos, params: DenoiseParams | None = None,
                     interp: str = "bilinear"):
    """Disparity minimising the mean absolute difference to the reference view's patch.

    Candidates leaving any view are skipped; ties go to the smallest magnitude.
    Returns ``(disparity, patch)``.
    """
    params = params or DenoiseParams()
    rows, cols = (list(r) for r in view_window)
    ur, vr = _window_reference(lf.valid, rows, cols)
    member = lf.valid[np.ix_(rows, cols)]
    iu, iv = rows.index(ur), cols.index(vr)
    best = None
    for d in params.disparities():
        try:
            patch = build_4d_patch(lf, (rows, cols), ref_pos, d, params.patch_size, interp)
        except PatchOutOfBounds:
            continue
        sad = np.abs(patch[member] - patch[iu, iv]).mean()
        if best is None or sad < best[0]:
            best = (sad, d, patch)
    if best is None:
        raise PatchOutOfBounds("reference patch leaves its own view")
    return float(best[1]), best[2]


def _box_sum(img: np.ndarray, p: int) -> np.ndarray:
    c = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    c[1:, 1:] = img.cumsum(0).cumsum(1)
    return c[p:, p:] - c[:-p, p:] - c[p:, :-p] + c[:-p, :-p]


def _similar_batch(img: np.ndarray, refs: np.ndarray, n_s: int, radius: int, p: int) -> np.ndarray:
    """Top-left (x, y) of the ``n_s`` most similar patches for each ref (R, 2) -> (R, n_s, 2)."""
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    nh, nw = h - p + 1, w - p + 1
    offs = np.array([(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)])
    ssd = np.full((len(refs), len(offs)), np.inf)
    rx, ry = refs[:, 0], refs[:, 1]
    for k, (dy, dx) in enumerate(offs):
        # candidate top-left = ref + (dx, dy), valid while it stays inside [0, nw) x [0, nh)
        ok = (rx + dx >= 0) & (rx + dx < nw) & (ry + dy >= 0) & (ry + dy < nh)
        if not ok.any():
            continue
        ys, ye = max(0, -dy), min(h, h - dy)
        xs, xe = max(0, -dx), min(w, w - dx)
        diff = ((img[ys + dy:ye + dy, xs + dx:xe + dx] - img[ys:ye, xs:xe]) ** 2).sum(-1)
        box = _box_sum(diff, p)
        ssd[ok, k] = box[ry[ok] - ys, rx[ok] - xs]
    centre = int(np.flatnonzero((offs == 0).all(1))[0])
    ssd[:, centre] = -1.0
    lin = offs[:, 0] * w + offs[:, 1]
    order = np.lexsort((np.broadcast_to(lin, ssd.shape), np.broadcast_to(np.abs(lin), ssd.shape), ssd), axis=-1)
    top = order[:, :n_s]
    return np.stack([rx[:, None] + offs[top, 1], ry[:, None] + offs[top, 0]], axis=-1)


def find_similar(view: np.ndarray, ref_pos, n_s: int = 8, search_radius: int = 16, patch_size: int = 8):
    """Exhaustive SSD block matching around ``ref_pos`` (top-left x, y).

    The reference is always first. Equal distances are ordered by distance
    from the reference in raster-scan order, then by raster position.
    """
    img = np.asarray(view, dtype=np.float64)
    h, w = img.shape[:2]
    p = patch_size
    x, y = (int(c) for c in ref_pos)
    if not (0 <= x <= w - p and 0 <= y <= h - p):
        raise PatchOutOfBounds(f"reference patch at ({x}, {y}) leaves the {w}x{h} image")
    n_cand = (min(x + search_radius, w - p) - max(x - search_radius, 0) + 1) * (
        min(y + search_radius, h - p) - max(y - search_radius, 0) + 1)
    pos = _similar_batch(img, np.array([[x, y]]), min(n_s, n_cand), search_radius, p)[0]
    return [tuple(int(c) for c in q) for q in pos]


# ------------------------------------------------------------------- filtering

def angular_windows(n: int, size: int) -> list[int]:
    """Start indices of overlapping windows of ``size`` covering ``n`` views."""
    size = min(size, n)
    if size == n:
        return [0]
    count = int(np.ceil((n - size) / max(size - 1, 1))) + 1
    return sorted(set(int(s) for s in np.round(np.linspace(0, n - size, count))))


def _grid(n: int, p: int) -> np.ndarray:
    g = list(range(0, n - p + 1, max(p // 2, 1)))
    if g[-1] != n - p:
        g.append(n - p)
    return np.array(g)


def _disparity_map(yw: np.ndarray, member: np.ndarray, iu: int, iv: int, cands: np.ndarray, p: int):
    """Per top-left position, index into ``cands`` of the best nearest-pixel disparity."""
    uw, vw, h, w = yw.shape
    nh, nw = h - p + 1, w - p + 1
    ref = yw[iu, iv]
    best = np.full((nh, nw), np.inf)
    idx = np.zeros((nh, nw), dtype=int)
    ys, xs = np.arange(nh)[:, None], np.arange(nw)[None, :]
    n_views = member.sum()
    for k, d in enumerate(cands):
        cost = np.zeros((nh, nw))
        for i in range(uw):
            for j in range(vw):
                if not member[i, j]:
                    continue
                ox, oy = int(np.floor(d * (j - iv) + 0.5)), int(np.floor(d * (i - iu) + 0.5))
                inside = (xs + ox >= 0) & (xs + ox < nw) & (ys + oy >= 0) & (ys + oy < nh)
                diff = np.zeros((h, w))
                a0, a1 = max(0, -oy), min(h, h - oy)
                b0, b1 = max(0, -ox), min(w, w - ox)
                diff[a0:a1, b0:b1] = np.abs(yw[i, j, a0 + oy:a1 + oy, b0 + ox:b1 + ox] - ref[a0:a1, b0:b1])
                cost += np.where(inside, _box_sum(diff, p), np.inf)
        cost /= n_views * p * p
        better = cost < best
        best[better], idx[better] = cost[better], k
    return idx


def _offsets(cands, iu, iv, uw, vw):
    """Integer (ox, oy) per candidate and window view: (K, U_w, V_w, 2)."""
    ju, jv = np.meshgrid(np.arange(uw) - iu, np.arange(vw) - iv, indexing="ij")
    d = np.asarray(cands)[:, None, None]
    return np.stack([np.floor(d * jv + 0.5), np.floor(d * ju + 0.5)], axis=-1).astype(int)


class _Accumulator:
    def __init__(self, shape):
        self.shape = shape  # (U, V, H, W, C)
        self.num = np.zeros(shape)
        self.den = np.zeros(shape)

    def add(self, uu, vv, yy, xx, values, weights):
        """Scatter ``values`` (..., C) at index arrays (...) with per-entry ``weights`` (..., C)."""
        U, V, H, W, C = self.shape
        flat = ((uu * V + vv) * H + yy) * W + xx
        flat = flat.ravel()
        n = U * V * H * W
        vals = values.reshape(-1, C)
        wts = np.broadcast_to(weights, values.shape).reshape(-1, C)
        for c in range(C):
            self.num[..., c] += np.bincount(flat, vals[:, c] * wts[:, c], minlength=n).reshape(U, V, H, W)
            self.den[..., c] += np.bincount(flat, wts[:, c], minlength=n).reshape(U, V, H, W)


def _process_window(data, pilot, valid, rows, cols, params, sigma, acc, refs_mask=None, force_zero=False,
                    disparity_source=None):
    """Filter all reference patches of one angular window and aggregate into ``acc``."""
    p = params.patch_size
    U, V, H, W, C = data.shape
    ur, vr = _window_reference(valid, rows, cols)
    iu, iv = rows.index(ur), cols.index(vr)
    member = valid[np.ix_(rows, cols)]
    uw, vw = len(rows), len(cols)
    cands = params.disparities()
    guide = data if disparity_source is None else disparity_source
    yw = guide[np.ix_(rows, cols)][..., 0]
    if force_zero:
        dmap = np.zeros((H - p + 1, W - p + 1), dtype=int)
    else:
        dmap = _disparity_map(yw, member, iu, iv, cands, p)
    offs = _offsets(cands, iu, iv, uw, vw)

    gy, gx = _grid(H, p), _grid(W, p)
    refs = np.stack(np.meshgrid(gx, gy, indexing="xy"), axis=-1).reshape(-1, 2)
    if refs_mask is not None:
        refs = refs[refs_mask(refs, rows, cols, offs[0])]
    if not len(refs):
        return
    n_s = params.num_similar
    n_cand = (2 * params.search_radius + 1) ** 2
    while n_s > 1 and n_s > min(n_cand, (H - p + 1) * (W - p + 1)):
        n_s //= 2
    sim = _similar_batch(yw[iu, iv], refs, n_s, params.search_radius, p)  # (R, N, 2)

    # invalid window members borrow the reference view's samples and receive nothing
    src_u = np.where(member, np.array(rows)[:, None], ur)
    src_v = np.where(member, np.array(cols)[None, :], vr)
    su = np.broadcast_to(src_u, (uw, vw))
    sv = np.broadcast_to(src_v, (uw, vw))
    po = np.arange(p)
    for s in range(0, len(refs), params.chunk):
        blk = sim[s:s + params.chunk]  # (B, N, 2)
        d_idx = dmap[blk[..., 1], blk[..., 0]]  # (B, N)
        o = offs[d_idx]  # (B, N, Uw, Vw, 2)
        o = np.where(member[None, None, :, :, None], o, offs[d_idx][:, :, iu:iu + 1, iv:iv + 1])
        x0 = blk[..., 0][:, :, None, None] + o[..., 0]
        y0 = blk[..., 1][:, :, None, None] + o[..., 1]
        shape = y0.shape + (p, p)
        yy = np.broadcast_to(y0[..., None, None] + po[:, None], shape)
        xx = np.broadcast_to(x0[..., None, None] + po[None, :], shape)
        uu = np.broadcast_to(su[None, None, :, :, None, None], yy.shape)
        vv = np.broadcast_to(sv[None, None, :, :, None, None], yy.shape)
        stack = data[uu, vv, yy, xx]  # (B, N, Uw, Vw, P, P, C)
        if pilot is None:
            out, wt = _hard_threshold(stack, sigma, params.hard_threshold)
        else:
            out, wt = _wiener(stack, pilot[uu, vv, yy, xx], sigma)
        keep = np.broadcast_to(member[None, None, :, :, None, None], yy.shape)
        wfull = np.broadcast_to(wt[:, None, None, None, None, None, :], out.shape)
        acc.add(uu[keep], vv[keep], yy[keep], xx[keep], out[keep], wfull[keep])


def _run_pass(data, pilot, valid, params, sigma):
    U, V, H, W, C = data.shape
    acc = _Accumulator(data.shape)
    wins = [(list(range(u0, u0 + min(params.angular_window, U))), list(range(v0, v0 + min(params.angular_window, V))))
            for u0 in angular_windows(U, params.angular_window) for v0 in angular_windows(V, params.angular_window)]
    guide = pilot
    for rows, cols in wins:
        if not valid[np.ix_(rows, cols)].any():
            continue
        _process_window(data, pilot, valid, rows, cols, params, sigma, acc, disparity_source=guide)

    # pixels missed because every compensated patch steered around them
    holes = (acc.den[..., 0] == 0) & valid[:, :, None, None]
    if holes.any():
        p = params.patch_size

        def needs(refs, rows, cols, _):
            m = np.zeros(len(refs), dtype=bool)
            for k, (x, y) in enumerate(refs):
                m[k] = holes[np.ix_(rows, cols)][:, :, y:y + p, x:x + p].any()
            return m

        for rows, cols in wins:
            if not valid[np.ix_(rows, cols)].any():
                continue
            _process_window(data, pilot, valid, rows, cols, params, sigma, acc, refs_mask=needs,
                            force_zero=True, disparity_source=guide)
    return acc


def denoise_lightfield(lf: LightField, params: DenoiseParams | None = None, workers: int = 1) -> LightField:
    """Denoise every valid view; invalid views are returned untouched.

    ``params.sigma`` of zero returns the input unchanged; ``None`` estimates
    sigma on the centre view.
    """
    params = params or DenoiseParams()
    sigma = params.sigma
    if sigma is None:
        from .metrics import estimate_noise

        sigma = estimate_noise(lf.centre_view())
        logger.info("estimated sigma %.6g on the centre view", sigma)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    history = list(lf.meta.get("history", [])) + ["denoise"]
    meta = dict(lf.meta, history=history, sigma=float(sigma))
    if sigma == 0:
        return lf.with_views(views=lf.views.copy(), meta=meta)
    if lf.channels not in (1, 3):
        raise ValueError("denoising expects 1 or 3 channels")
    if min(lf.height, lf.width) < params.patch_size:
        raise ValueError("views are smaller than one patch")

    basis = OPPONENT if lf.channels == 3 else np.eye(1)
    data = lf.views @ basis.T
    valid = lf.valid
    acc = _run_pass(data, None, valid, params, sigma)
    est = acc.num / np.maximum(acc.den, 1e-300)
    if params.stage is Stage.HARD_PLUS_WIENER:
        est = np.where(valid[:, :, None, None, None], est, data)
        acc = _run_pass(data, est, valid, params, sigma)
        est = acc.num / np.maximum(acc.den, 1e-300)
    out = est @ basis
    views = np.where(valid[:, :, None, None, None], out, lf.views)
    return lf.with_views(views=views, meta=meta)
