"""Lenslet RAW decoding into sub-aperture images.

The chain is white-image normalisation, devignetting, demosaicing and view
extraction, in that order. Geometry follows a pinhole-per-lenslet model: the
sensor position sampled for view ``(u, v)`` under lenslet ``(s, t)`` is the
lenslet centre plus a rotated offset proportional to ``(v - v_c, u - u_c)``
(column index along x, row index along y).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .core import ColourSpace, LightField, as_image, luminance

logger = logging.getLogger(__name__)

#: Floor below which a normalised white-image sample is treated as unreliable.
EPS_WI = 1e-3
#: Floor on the summed WI-weighted bicubic taps before falling back to plain bicubic.
EPS_W = 1e-6

BAYER_PATTERNS = ("RGGB", "GRBG", "GBRG", "BGGR")


class DecodeError(ValueError):
    """Invalid decoding input (geometry, dimensions, degenerate white image)."""


class Layout(str, Enum):
    SQUARE = "Square"
    HEX_ROW_OFFSET = "HexRowOffset"


class Interpolation(str, Enum):
    BICUBIC = "Bicubic"
    WI_GUIDED_BICUBIC = "WiGuidedBicubic"


@dataclass(frozen=True)
class PlenopticRaw:
    """Single-channel sensor mosaic with its CFA layout and levels."""

    sensor: np.ndarray
    bayer_pattern: str = "RGGB"
    black_level: float = 0.0
    saturation_level: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sensor", as_image(self.sensor, channels=1))
        if self.bayer_pattern not in BAYER_PATTERNS:
            raise DecodeError(f"unknown bayer pattern {self.bayer_pattern!r}")
        if not self.black_level < self.saturation_level:
            raise DecodeError("black level must be below saturation level")

    def linearized(self) -> np.ndarray:
        """Sensor samples with the black level removed, scaled to [0, 1] at saturation."""
        span = self.saturation_level - self.black_level
        if self.black_level == 0.0 and span == 1.0:
            return self.sensor
        return np.clip((self.sensor - self.black_level) / span, 0.0, None)


@dataclass(frozen=True)
class WhiteImage(PlenopticRaw):
    """Flat-field capture showing the micro-lens vignetting pattern."""

    def flagged(self, eps: float = EPS_WI) -> np.ndarray:
        """Boolean mask of samples too dark to divide by."""
        return self.linearized() < eps


@dataclass(frozen=True)
class WhiteBalanceFactors:
    r_gain: float = 1.0
    b_gain: float = 1.0

    def __post_init__(self):
        if not (self.r_gain > 0 and self.b_gain > 0):
            raise DecodeError("white balance gains must be positive")


@dataclass(frozen=True)
class LensletGrid:
    """Micro-lens centres on the sensor.

    Lenslet ``(s, t)`` (row, column) sits at ``offset + R(rotation) @ local``
    with ``local = (t * spacing_x [+ spacing_x / 2 on odd rows for hex], s * spacing_y)``.
    """

    spacing_x: float
    spacing_y: float
    lens_rows: int
    lens_cols: int
    offset_x: float = 0.0
    offset_y: float = 0.0
    rotation: float = 0.0
    layout: Layout = Layout.SQUARE

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout(self.layout))
        if self.spacing_x <= 2 or self.spacing_y <= 2:
            raise DecodeError("lenslet spacing must exceed 2 sensor pixels")
        if abs(self.rotation) >= 0.1:
            raise DecodeError("grid rotation magnitude must be below 0.1 rad")
        if self.lens_rows < 1 or self.lens_cols < 1:
            raise DecodeError("grid needs at least one lenslet")

    @property
    def radius(self) -> float:
        return 0.5 * min(self.spacing_x, self.spacing_y)

    def rotation_matrix(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def local_centers(self) -> np.ndarray:
        """Unrotated lenslet centres relative to the offset, shape ``(rows, cols, 2)`` as (x, y)."""
        s, t = np.meshgrid(np.arange(self.lens_rows), np.arange(self.lens_cols), indexing="ij")
        x = t * self.spacing_x
        if self.layout is Layout.HEX_ROW_OFFSET:
            x = x + (s % 2) * (self.spacing_x / 2.0)
        y = s * self.spacing_y
        return np.stack([x, y], axis=-1).astype(np.float64)

    def centers(self) -> np.ndarray:
        """Sensor coordinates (x, y) of every lenslet centre, shape ``(rows, cols, 2)``."""
        return self.local_centers() @ self.rotation_matrix().T + np.array([self.offset_x, self.offset_y])

    def to_dict(self) -> dict:
        return {
            "spacing_x": self.spacing_x,
            "spacing_y": self.spacing_y,
            "lens_rows": self.lens_rows,
            "lens_cols": self.lens_cols,
            "offset_x": self.offset_x,
            "offset_y": self.offset_y,
            "rotation": self.rotation,
            "layout": self.layout.value,
        }


@dataclass(frozen=True)
class DecodeParams:
    num_views_u: int = 9
    num_views_v: int = 9
    interpolation: Interpolation = Interpolation.WI_GUIDED_BICUBIC
    demosaic: str = "GradientCorrectedBilinear"
    percentile: float = 0.999
    dark_view_luma_floor: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "interpolation", Interpolation(self.interpolation))
        if self.num_views_u % 2 == 0 or self.num_views_v % 2 == 0 or min(self.num_views_u, self.num_views_v) < 1:
            raise DecodeError("view counts must be odd and positive so a centre view exists")
        if not 0.9 < self.percentile < 1.0:
            raise DecodeError("percentile must lie in (0.9, 1)")
        if self.demosaic != "GradientCorrectedBilinear":
            raise DecodeError(f"unsupported demosaic method {self.demosaic!r}")


class Devignetted(NamedTuple):
    image: np.ndarray
    saturated: np.ndarray
    invalid: np.ndarray


# --- CFA helpers -------------------------------------------------------------

def cfa_channels(pattern: str, shape: tuple[int, int]) -> np.ndarray:
    """Per-pixel colour index (0=R, 1=G, 2=B) for a Bayer pattern."""
    if pattern not in BAYER_PATTERNS:
        raise DecodeError(f"unknown bayer pattern {pattern!r}")
    lut = np.array(["RGB".index(c) for c in pattern]).reshape(2, 2)
    rows = np.arange(shape[0]) % 2
    cols = np.arange(shape[1]) % 2
    return lut[rows[:, None], cols[None, :]]


def apply_white_balance(wi: WhiteImage, wb: WhiteBalanceFactors) -> np.ndarray:
    """Black-level-corrected WI with red and blue sites multiplied by their gains."""
    data = wi.linearized()
    site_gain = np.array([wb.r_gain, 1.0, wb.b_gain])[cfa_channels(wi.bayer_pattern, data.shape)]
    return data * site_gain


def normalize_white_image(wi: WhiteImage, wb: WhiteBalanceFactors, percentile: float = 0.999) -> WhiteImage:
    """Apply white-balance gains by CFA site, then divide by the ``percentile`` quantile.

    A quantile rather than the maximum keeps isolated hot pixels from setting
    the scale.
    """
    balanced = apply_white_balance(wi, wb)
    q = float(np.quantile(balanced, percentile))
    if not q > 0:
        raise DecodeError(f"degenerate white image: {percentile} quantile is {q}")
    return WhiteImage(balanced / q, bayer_pattern=wi.bayer_pattern)


def devignette(raw, wi_norm, eps_wi: float = EPS_WI) -> Devignetted:
    """Pixel-wise division of the RAW mosaic by the normalised white image.

    Samples above 1 are clipped and flagged saturated; samples whose WI value is
    below ``eps_wi`` are flagged invalid (the division uses the floor).
    """
    r = raw.linearized() if isinstance(raw, PlenopticRaw) else as_image(raw, channels=1)
    w = wi_norm.linearized() if isinstance(wi_norm, PlenopticRaw) else as_image(wi_norm, channels=1)
    if r.shape != w.shape:
        raise DecodeError(f"RAW shape {r.shape} does not match white image shape {w.shape}")
    out = r / np.maximum(w, eps_wi)
    saturated = out > 1.0
    np.minimum(out, 1.0, out=out)
    return Devignetted(out, saturated, w < eps_wi)


# --- demosaicing -------------------------------------------------------------

# Gradient-corrected bilinear filters (Malvar, He and Cutler 2004), scaled by 1/8.
G_AT_RB = np.array(
    [
        [0, 0, -1, 0, 0],
        [0, 0, 2, 0, 0],
        [-1, 2, 4, 2, -1],
        [0, 0, 2, 0, 0],
        [0, 0, -1, 0, 0],
    ]
) / 8.0
# R at green sites in R rows (B at green sites in B rows).
RB_AT_G_ROW = np.array(
    [
        [0, 0, 0.5, 0, 0],
        [0, -1, 0, -1, 0],
        [-1, 4, 5, 4, -1],
        [0, -1, 0, -1, 0],
        [0, 0, 0.5, 0, 0],
    ]
) / 8.0
# R at green sites in B rows (B at green sites in R rows).
RB_AT_G_COL = RB_AT_G_ROW.T.copy()
# R at B sites (B at R sites).
RB_AT_BR = np.array(
    [
        [0, 0, -1.5, 0, 0],
        [0, 2, 0, 2, 0],
        [-1.5, 0, 6, 0, -1.5],
        [0, 2, 0, 2, 0],
        [0, 0, -1.5, 0, 0],
    ]
) / 8.0


def demosaic(mosaic, pattern: str = "RGGB") -> np.ndarray:
    """Gradient-corrected bilinear demosaicing with 2-pixel mirror padding."""
    m = as_image(mosaic, channels=1)
    if m.shape[0] < 5 or m.shape[1] < 5:
        raise DecodeError("mosaic must be at least 5x5 for the 5x5 demosaicing filters")
    ch = cfa_channels(pattern, m.shape)
    is_r, is_g, is_b = ch == 0, ch == 1, ch == 2
    # green sites sharing a row with red samples
    r_row = np.broadcast_to(np.any(is_r, axis=1, keepdims=True), m.shape)
    b_row = ~r_row

    def filt(k):
        # 'mirror' reflects about the edge sample and preserves CFA parity
        return ndimage.correlate(m, k, mode="mirror")

    g_rb = filt(G_AT_RB)
    g_row = filt(RB_AT_G_ROW)
    g_col = filt(RB_AT_G_COL)
    rb_br = filt(RB_AT_BR)

    out = np.empty(m.shape + (3,))
    out[..., 0] = np.select([is_r, is_g & r_row, is_g & b_row, is_b], [m, g_row, g_col, rb_br])
    out[..., 1] = np.where(is_g, m, g_rb)
    out[..., 2] = np.select([is_b, is_g & b_row, is_g & r_row, is_r], [m, g_row, g_col, rb_br])
    return np.clip(out, 0.0, 1.0)


# --- view extraction -----------------------------------------------------------

def cubic_weights(frac: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution weights for taps at offsets -1, 0, 1, 2 from ``floor(x)``."""
    t = frac[..., None] - np.array([-1.0, 0.0, 1.0, 2.0])
    at = np.abs(t)
    w = np.where(
        at <= 1.0,
        (a + 2.0) * at**3 - (a + 3.0) * at**2 + 1.0,
        np.where(at < 2.0, a * at**3 - 5.0 * a * at**2 + 8.0 * a * at - 4.0 * a, 0.0),
    )
    return w


def view_positions(grid: LensletGrid, params: DecodeParams, u: int, v: int) -> np.ndarray:
    """Continuous sensor (x, y) positions sampled for view ``(u, v)``, shape ``(rows, cols, 2)``."""
    du = grid.spacing_y / params.num_views_u
    dv = grid.spacing_x / params.num_views_v
    uc, vc = params.num_views_u // 2, params.num_views_v // 2
    offset = grid.rotation_matrix() @ np.array([(v - vc) * dv, (u - uc) * du])
    return grid.centers() + offset


def sample_bicubic(img: np.ndarray, pos: np.ndarray, weights: np.ndarray | None = None,
                   eps_w: float = EPS_W) -> np.ndarray:
    """Bicubic sampling of ``img`` (H, W, C) at ``pos`` (..., 2) in (x, y).

    With ``weights`` (H, W) each tap's kernel value is multiplied by the weight
    and the sum renormalised; locations where the weighted kernel mass falls
    below ``eps_w`` use the unweighted kernel instead. Taps beyond the border
    are clamped to the edge.
    """
    H, W = img.shape[:2]
    flat = img.reshape(H * W, -1)
    x, y = pos[..., 0], pos[..., 1]
    x0, y0 = np.floor(x), np.floor(y)
    kx = cubic_weights(x - x0)  # (..., 4)
    ky = cubic_weights(y - y0)
    xi = np.clip(x0[..., None].astype(np.int64) + np.arange(-1, 3), 0, W - 1)
    yi = np.clip(y0[..., None].astype(np.int64) + np.arange(-1, 3), 0, H - 1)
    idx = (yi[..., :, None] * W + xi[..., None, :]).reshape(pos.shape[:-1] + (16,))
    k = (ky[..., :, None] * kx[..., None, :]).reshape(pos.shape[:-1] + (16,))
    taps = flat[idx]  # (..., 16, C)

    plain_mass = k.sum(axis=-1)
    plain = np.einsum("...k,...kc->...c", k, taps) / plain_mass[..., None]
    if weights is None:
        return plain
    kw = k * weights.reshape(-1)[idx]
    mass = kw.sum(axis=-1)
    ok = mass >= eps_w
    guided = np.einsum("...k,...kc->...c", kw, taps) / np.where(ok, mass, 1.0)[..., None]
    return np.where(ok[..., None], guided, plain)


def extract_views(devig, wi_norm, grid: LensletGrid, params: DecodeParams, workers: int = 1) -> LightField:
    """Resample a devignetted, demosaiced sensor image into a grid of views.

    Views are independent of each other; ``workers > 1`` extracts them on a
    thread pool with identical results.
    """
    img = as_image(devig, channels=3)
    du = grid.spacing_y / params.num_views_u
    dv = grid.spacing_x / params.num_views_v
    if du < 1.0 or dv < 1.0:
        raise DecodeError(
            f"{params.num_views_u}x{params.num_views_v} views exceed lenslet spacing "
            f"({grid.spacing_x}x{grid.spacing_y} px)"
        )
    weights = None
    if params.interpolation is Interpolation.WI_GUIDED_BICUBIC:
        weights = wi_norm.linearized() if isinstance(wi_norm, PlenopticRaw) else as_image(wi_norm, channels=1)
        if weights.shape != img.shape[:2]:
            raise DecodeError("white image and sensor image sizes differ")

    U, V = params.num_views_u, params.num_views_v
    views = np.empty((U, V, grid.lens_rows, grid.lens_cols, 3))

    def one(uv):
        u, v = uv
        views[u, v] = sample_bicubic(img, view_positions(grid, params, u, v), weights)

    jobs = [(u, v) for u in range(U) for v in range(V)]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(one, jobs))
    else:
        for job in jobs:
            one(job)
    np.clip(views, 0.0, 1.0, out=views)

    mean_luma = luminance(views).mean(axis=(2, 3))
    valid = mean_luma >= params.dark_view_luma_floor
    if not valid[U // 2, V // 2]:
        raise DecodeError("centre view is below the dark-view floor")
    if not valid.all():
        logger.info("marking %d dark views invalid", int((~valid).sum()))
    return LightField(views, valid, ColourSpace.LINEAR_RGB, meta={"history": ["decode"]})


def decode(raw: PlenopticRaw, wi: WhiteImage, wb: WhiteBalanceFactors, grid: LensletGrid,
           params: DecodeParams | None = None, workers: int = 1) -> LightField:
    """Full decoding: normalise WI, devignette, demosaic, extract views."""
    params = params or DecodeParams()
    if raw.sensor.shape != wi.sensor.shape:
        raise DecodeError(f"RAW {raw.sensor.shape} and white image {wi.sensor.shape} differ in size")
    if raw.bayer_pattern != wi.bayer_pattern:
        raise DecodeError("RAW and white image use different bayer patterns")
    wi_norm = normalize_white_image(wi, wb, params.percentile)
    dv = devignette(raw, wi_norm)
    rgb = demosaic(dv.image, raw.bayer_pattern)
    return extract_views(rgb, wi_norm, grid, params, workers=workers)
