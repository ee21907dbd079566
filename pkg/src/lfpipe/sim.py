"""Forward lenslet model: synthetic scenes, white images and RAW mosaics.

The simulator shares the lenslet geometry (:class:`~lfpipe.decode.LensletGrid`)
with the decoder but samples the light field with its own bilinear code, so a
decode round trip is a genuine check rather than an identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import ColourSpace, LightField, lab_to_rgb, rgb_to_lab, srgb_decode
from .decode import (
    DecodeError,
    Layout,
    LensletGrid,
    PlenopticRaw,
    WhiteBalanceFactors,
    WhiteImage,
    cfa_channels,
)

WI_PEAK = 0.95
HOT_PIXEL_VALUE = 10.0


class SceneKind(str, Enum):
    FLAT_GREY = "FlatGrey"
    SMOOTH_GRADIENT = "SmoothGradient"
    TEXTURED_DISPARITY = "TexturedDisparity"
    COLOR_CHART = "ColorChart"


# ColorChecker Classic, 8-bit sRGB, row-major from "dark skin" to "black".
COLOR_CHART_SRGB8 = np.array(
    [
        [115, 82, 68], [194, 150, 130], [98, 122, 157], [87, 108, 67], [133, 128, 177], [103, 189, 170],
        [214, 126, 44], [80, 91, 166], [193, 90, 99], [94, 60, 108], [157, 188, 64], [224, 163, 46],
        [56, 61, 150], [70, 148, 73], [175, 54, 60], [231, 199, 31], [187, 86, 149], [8, 133, 161],
        [243, 243, 242], [200, 200, 200], [160, 160, 160], [122, 122, 121], [85, 85, 85], [52, 52, 52],
    ],
    dtype=np.float64,
).reshape(4, 6, 3)
#: The same palette in linear RGB.
COLOR_CHART = srgb_decode(COLOR_CHART_SRGB8 / 255.0)


@dataclass(frozen=True)
class SimParams:
    grid: LensletGrid
    vignette_sigma: float = 0.5
    wb_gains_applied: WhiteBalanceFactors = field(default_factory=WhiteBalanceFactors)
    noise_sigma: float = 0.0
    hot_pixel_count: int = 0
    bayer_pattern: str = "RGGB"
    seed: int = 0

    def __post_init__(self):
        if not self.vignette_sigma > 0:
            raise ValueError("vignette_sigma must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def grid_for(lens_rows: int, lens_cols: int, spacing: float = 11.0, rotation: float = 0.0,
             layout: Layout | str = Layout.SQUARE) -> tuple[LensletGrid, int, int]:
    """A grid with integer-aligned centres plus the sensor size that contains it.

    Returns ``(grid, width, height)``.
    """
    probe = LensletGrid(spacing, spacing, lens_rows, lens_cols, rotation=rotation, layout=layout)
    c = probe.centers()
    half = spacing / 2.0
    # first lenslet cell starts at pixel 0, so no sensor margin is left unowned
    ox = np.floor(half - c[..., 0].min())
    oy = np.floor(half - c[..., 1].min())
    width = int(np.ceil(c[..., 0].max() + ox + half))
    height = int(np.ceil(c[..., 1].max() + oy + half))
    grid = LensletGrid(spacing, spacing, lens_rows, lens_cols, float(ox), float(oy), rotation, layout)
    return grid, width, height


def lenslet_ownership(grid: LensletGrid, width: int, height: int):
    """Nearest lenslet of every sensor pixel.

    Returns ``(s, t, off, inside)`` where ``off`` is the (x, y) offset from the
    owning centre in the unrotated lenslet frame and ``inside`` flags pixels
    whose nearest lenslet exists in the grid.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    rel = np.stack([xx - grid.offset_x, yy - grid.offset_y], axis=-1)
    local = rel @ grid.rotation_matrix()  # R^T applied to row vectors
    lx, ly = local[..., 0], local[..., 1]
    sx, sy = grid.spacing_x, grid.spacing_y

    if grid.layout is Layout.SQUARE:
        s = np.floor(ly / sy + 0.5).astype(np.int64)
        t = np.floor(lx / sx + 0.5).astype(np.int64)
    else:
        best = None
        s0 = np.floor(ly / sy).astype(np.int64)
        for cand in (s0, s0 + 1):
            shift = (cand % 2) * (sx / 2.0)
            tc = np.floor((lx - shift) / sx + 0.5).astype(np.int64)
            d2 = (lx - shift - tc * sx) ** 2 + (ly - cand * sy) ** 2
            if best is None:
                best = (cand, tc, d2)
            else:
                take = d2 < best[2]
                best = (np.where(take, cand, best[0]), np.where(take, tc, best[1]), np.minimum(d2, best[2]))
        s, t = best[0], best[1]

    cx = t * sx + (grid.layout is Layout.HEX_ROW_OFFSET) * (s % 2) * (sx / 2.0)
    off = np.stack([lx - cx, ly - s * sy], axis=-1)
    inside = (s >= 0) & (s < grid.lens_rows) & (t >= 0) & (t < grid.lens_cols)
    return np.clip(s, 0, grid.lens_rows - 1), np.clip(t, 0, grid.lens_cols - 1), off, inside


def vignetting(params: SimParams, width: int, height: int) -> np.ndarray:
    """Per-pixel Gaussian micro-lens falloff with unit peak; zero outside the grid."""
    _, _, off, inside = lenslet_ownership(params.grid, width, height)
    scale = params.vignette_sigma * params.grid.radius
    r2 = (off**2).sum(axis=-1)
    return np.where(inside, np.exp(-r2 / (2.0 * scale * scale)), 0.0)


def synth_white_image(params: SimParams, width: int, height: int) -> WhiteImage:
    """White image with peak ``0.95 / site gain`` at each lenslet centre.

    Red and blue sites are divided by the simulated white-balance gains so that
    the decoder's gain multiplication cancels them.
    """
    vig = vignetting(params, width, height)
    wb = params.wb_gains_applied
    site = np.array([wb.r_gain, 1.0, wb.b_gain])[cfa_channels(params.bayer_pattern, (height, width))]
    wi = WI_PEAK * vig / site
    if params.hot_pixel_count:
        rng = np.random.default_rng([params.seed, 1])
        idx = rng.choice(wi.size, size=params.hot_pixel_count, replace=False)
        wi.reshape(-1)[idx] = HOT_PIXEL_VALUE
    return WhiteImage(wi, bayer_pattern=params.bayer_pattern)


def _bilinear_lf(views: np.ndarray, uf, vf, s, t, ch) -> np.ndarray:
    U, V = views.shape[:2]
    uf = np.clip(uf, 0.0, U - 1.0)
    vf = np.clip(vf, 0.0, V - 1.0)
    u0 = np.minimum(np.floor(uf).astype(np.int64), max(U - 2, 0))
    v0 = np.minimum(np.floor(vf).astype(np.int64), max(V - 2, 0))
    a, b = uf - u0, vf - v0
    u1, v1 = np.minimum(u0 + 1, U - 1), np.minimum(v0 + 1, V - 1)
    return (
        (1 - a) * (1 - b) * views[u0, v0, s, t, ch]
        + (1 - a) * b * views[u0, v1, s, t, ch]
        + a * (1 - b) * views[u1, v0, s, t, ch]
        + a * b * views[u1, v1, s, t, ch]
    )


def simulate_raw(lf: LightField, params: SimParams, width: int, height: int) -> PlenopticRaw:
    """Render a Bayer RAW mosaic of ``lf`` seen through the lenslet grid.

    Each pixel samples its lenslet's spatial position at the fractional view
    coordinate given by its offset from the lenslet centre, is attenuated by
    the vignetting falloff (unit peak), filtered by its CFA site, and receives
    AWGN before clipping to [0, 1].
    """
    if lf.U < 2 or lf.V < 2:
        raise DecodeError("light field must have at least 2x2 views to simulate")
    if lf.channels != 3:
        raise ValueError("simulate_raw expects a 3-channel linear RGB light field")
    grid = params.grid
    if lf.height < grid.lens_rows or lf.width < grid.lens_cols:
        raise DecodeError("lenslet grid is larger than the light field's spatial extent")

    s, t, off, inside = lenslet_ownership(grid, width, height)
    du = grid.spacing_y / lf.U
    dv = grid.spacing_x / lf.V
    uf = lf.U // 2 + off[..., 1] / du
    vf = lf.V // 2 + off[..., 0] / dv
    ch = cfa_channels(params.bayer_pattern, (height, width))

    out = np.empty((height, width))
    step = 256
    for r0 in range(0, height, step):
        sl = slice(r0, r0 + step)
        out[sl] = _bilinear_lf(lf.views, uf[sl], vf[sl], s[sl], t[sl], ch[sl])

    scale = params.vignette_sigma * grid.radius
    vig = np.exp(-(off**2).sum(axis=-1) / (2.0 * scale * scale))
    out = np.where(inside, out * vig, 0.0)
    if params.noise_sigma > 0:
        rng = np.random.default_rng([params.seed, 2])
        out = out + rng.normal(0.0, params.noise_sigma, size=out.shape)
    return PlenopticRaw(np.clip(out, 0.0, 1.0), bayer_pattern=params.bayer_pattern)


# --- procedural scenes -------------------------------------------------------

def _texture(seed: int, components: int = 24):
    rng = np.random.default_rng([seed, 3])
    freq = rng.uniform(0.015, 0.09, size=(3, components))
    theta = rng.uniform(0, np.pi, size=(3, components))
    phase = rng.uniform(0, 2 * np.pi, size=(3, components))
    amp = rng.uniform(0.5, 1.0, size=(3, components))
    fx, fy = freq * np.cos(theta), freq * np.sin(theta)
    norm = np.sqrt((amp**2).sum(axis=1) / 2.0)

    def f(x, y):
        out = np.empty(x.shape + (3,))
        for c in range(3):
            arg = 2 * np.pi * (x[..., None] * fx[c] + y[..., None] * fy[c]) + phase[c]
            out[..., c] = 0.5 + 0.15 * (amp[c] * np.sin(arg)).sum(axis=-1) / norm[c]
        return np.clip(out, 0.05, 0.95)

    return f


def _smooth(x, y, w, h):
    r = 0.25 + 0.5 * x / max(w - 1, 1)
    g = 0.25 + 0.5 * y / max(h - 1, 1)
    b = 0.5 + 0.2 * np.sin(2 * np.pi * x / w) * np.cos(2 * np.pi * y / h)
    return np.stack([r, g, b], axis=-1)


def _chart(x, y, w, h):
    i = np.clip(np.floor(y * 4 / h).astype(int), 0, 3)
    j = np.clip(np.floor(x * 6 / w).astype(int), 0, 5)
    return COLOR_CHART[i, j]


def synth_lightfield(kind, U: int, V: int, w: int, h: int, disparity: float = 0.0, seed: int = 0) -> LightField:
    """Deterministic procedural light field.

    View ``(u, v)`` is the scene translated by ``disparity * (v - v_c, u - u_c)``
    pixels in (x, y), i.e. ``view(x, y) = scene(x - d (v - v_c), y - d (u - u_c))``.
    """
    kind = SceneKind(kind)
    if abs(disparity) * max(U, V) >= w / 4:
        raise ValueError("disparity too large for the view width")
    uc, vc = U // 2, V // 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    views = np.empty((U, V, h, w, 3))
    tex = _texture(seed) if kind is SceneKind.TEXTURED_DISPARITY else None
    for u in range(U):
        for v in range(V):
            x = xx - disparity * (v - vc)
            y = yy - disparity * (u - uc)
            if kind is SceneKind.FLAT_GREY:
                views[u, v] = 0.5
            elif kind is SceneKind.SMOOTH_GRADIENT:
                views[u, v] = _smooth(x, y, w, h)
            elif kind is SceneKind.TEXTURED_DISPARITY:
                views[u, v] = tex(x, y)
            else:
                views[u, v] = _chart(x, y, w, h)
    meta = {"scene": kind.value, "disparity": float(disparity), "seed": int(seed)}
    return LightField(views, np.ones((U, V), bool), ColourSpace.LINEAR_RGB, meta=meta)


def shift_lightness(lf: LightField, delta_l: float, include_centre: bool = False) -> LightField:
    """Add ``delta_l`` to CIELAB L* of every (non-centre) view, clipping to gamut."""
    views = lf.views.copy()
    for u, v in lf.valid_views():
        if (u, v) == lf.centre and not include_centre:
            continue
        lab = rgb_to_lab(views[u, v], lf.white_point)
        lab[..., 0] += delta_l
        views[u, v], _ = lab_to_rgb(lab, lf.white_point)
    meta = dict(lf.meta, lightness_shift=float(delta_l))
    return lf.with_views(views=views, meta=meta)
