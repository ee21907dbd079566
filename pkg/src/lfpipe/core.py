"""Image and light field containers, colour conversions and on-disk layout.

Images are plain ``numpy`` arrays of shape ``(H, W)`` or ``(H, W, 3)`` holding
float64 samples. Linear RGB is nominally in ``[0, 1]``; LAB images carry
native CIELAB ranges. A :class:`LightField` stacks its sub-aperture images in a
single ``(U, V, H, W, C)`` array.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import cv2
import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "ColourSpace",
    "LightField",
    "LightFieldIOError",
    "D65",
    "RGB_TO_XYZ",
    "XYZ_TO_RGB",
    "as_image",
    "srgb_encode",
    "srgb_decode",
    "rgb_to_xyz",
    "xyz_to_lab",
    "lab_to_xyz",
    "rgb_to_lab",
    "lab_to_rgb",
    "luminance",
    "load_lightfield",
    "save_lightfield",
]

#: CIE D65 reference white (Y normalised to 1).
D65 = np.array([0.95047, 1.0, 1.08883])

#: Linear Rec.709 / sRGB primaries to CIE XYZ (D65).
RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)

_LUMA = RGB_TO_XYZ[1]

_SRGB_KNEE = 0.0031308
_SRGB_KNEE_ENCODED = 0.04045

_LAB_EPS = 216.0 / 24389.0
_LAB_KAPPA = 24389.0 / 27.0


class ColourSpace(str, Enum):
    LINEAR_RGB = "LinearRGB"
    SRGB = "SRGB"
    LAB = "LAB"


class LightFieldIOError(ValueError):
    """Raised when a light field directory is malformed."""


def as_image(img, channels: int | None = None) -> np.ndarray:
    """Return ``img`` as a float64 array, optionally checking channel count."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected a 2D or 3D image array, got shape {arr.shape}")
    if channels is not None:
        got = 1 if arr.ndim == 2 else arr.shape[-1]
        if got != channels:
            raise ValueError(f"expected {channels} channels, got {got}")
    return arr


def _check_rgb(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape[-1:] != (3,):
        raise ValueError(f"expected 3 colour channels in the last axis, got shape {arr.shape}")
    return arr


def _check_white(white_point) -> np.ndarray:
    wp = np.asarray(white_point, dtype=np.float64)
    if wp.shape != (3,) or np.any(wp <= 0) or not np.all(np.isfinite(wp)):
        raise ValueError(f"white point must be 3 strictly positive values, got {white_point!r}")
    return wp


def srgb_encode(img) -> np.ndarray:
    """Apply the sRGB transfer curve to a linear RGB image (clipped to [0, 1])."""
    x = np.clip(_check_rgb(img), 0.0, 1.0)
    return np.where(x <= _SRGB_KNEE, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_decode(img) -> np.ndarray:
    """Inverse of :func:`srgb_encode`."""
    x = np.clip(_check_rgb(img), 0.0, 1.0)
    return np.where(x <= _SRGB_KNEE_ENCODED, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def rgb_to_xyz(img) -> np.ndarray:
    return _check_rgb(img) @ RGB_TO_XYZ.T


def xyz_to_lab(xyz, white_point=D65) -> np.ndarray:
    wp = _check_white(white_point)
    t = _check_rgb(xyz) / wp
    f = np.where(t > _LAB_EPS, np.cbrt(t), (_LAB_KAPPA * t + 16.0) / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_xyz(lab, white_point=D65) -> np.ndarray:
    wp = _check_white(white_point)
    lab = _check_rgb(lab)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    t = np.where(f**3 > _LAB_EPS, f**3, (116.0 * f - 16.0) / _LAB_KAPPA)
    return t * wp


def rgb_to_lab(img, white_point=D65) -> np.ndarray:
    """Linear RGB (Rec.709 primaries) to CIELAB relative to ``white_point``."""
    return xyz_to_lab(rgb_to_xyz(img), white_point)


def lab_to_rgb(img, white_point=D65) -> tuple[np.ndarray, int]:
    """CIELAB to linear RGB.

    Out-of-gamut results are clipped to ``[0, 1]`` per channel.

    Returns
    -------
    rgb : np.ndarray
        Linear RGB image.
    clipped : int
        Number of pixels with at least one clipped channel.
    """
    rgb = lab_to_xyz(img, white_point) @ XYZ_TO_RGB.T
    # round-off on exact in-gamut inputs sits around 1e-15
    out = (rgb < -1e-9) | (rgb > 1.0 + 1e-9)
    clipped = int(np.count_nonzero(out.any(axis=-1)))
    return np.clip(rgb, 0.0, 1.0), clipped


def luminance(img) -> np.ndarray:
    """Relative luminance Y of a linear RGB image; 2D input is returned as is."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    return arr @ _LUMA


@dataclass(frozen=True)
class LightField:
    """U x V grid of sub-aperture images.

    Attributes
    ----------
    views : np.ndarray
        Array of shape ``(U, V, H, W, C)``.
    valid : np.ndarray
        Boolean ``(U, V)`` mask; the centre view is always valid.
    colour_space : ColourSpace
    white_point : np.ndarray
        XYZ white used for LAB conversions.
    meta : dict
        Free-form metadata carried through the pipeline (stage history, scene
        parameters); persisted in the manifest.
    """

    views: np.ndarray
    valid: np.ndarray
    colour_space: ColourSpace = ColourSpace.LINEAR_RGB
    white_point: np.ndarray = field(default_factory=lambda: D65.copy())
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        views = np.asarray(self.views, dtype=np.float64)
        if views.ndim == 4:
            views = views[..., None]
        if views.ndim != 5 or views.shape[-1] not in (1, 3):
            raise ValueError(f"views must have shape (U, V, H, W, C), got {views.shape}")
        valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != views.shape[:2]:
            raise ValueError(f"valid mask shape {valid.shape} does not match grid {views.shape[:2]}")
        if not valid[self.centre]:
            raise ValueError("the centre view must be valid")
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "colour_space", ColourSpace(self.colour_space))
        object.__setattr__(self, "white_point", _check_white(self.white_point))

    @property
    def U(self) -> int:
        return self.views.shape[0]

    @property
    def V(self) -> int:
        return self.views.shape[1]

    @property
    def height(self) -> int:
        return self.views.shape[2]

    @property
    def width(self) -> int:
        return self.views.shape[3]

    @property
    def channels(self) -> int:
        return self.views.shape[4]

    @property
    def centre(self) -> tuple[int, int]:
        return (self.views.shape[0] // 2, self.views.shape[1] // 2)

    def view(self, u: int, v: int) -> np.ndarray:
        img = self.views[u, v]
        return img[..., 0] if img.shape[-1] == 1 else img

    def centre_view(self) -> np.ndarray:
        return self.view(*self.centre)

    def valid_views(self) -> list[tuple[int, int]]:
        return [tuple(int(i) for i in idx) for idx in np.argwhere(self.valid)]

    def with_views(self, views=None, valid=None, **kw) -> "LightField":
        """Copy with replaced arrays; unspecified fields are shared."""
        return replace(
            self,
            views=self.views if views is None else views,
            valid=self.valid if valid is None else valid,
            **kw,
        )


# --- on-disk layout --------------------------------------------------------

MANIFEST = "manifest.json"


def _view_name(u: int, v: int, ext: str = ".png") -> str:
    return f"view_{u:02d}_{v:02d}{ext}"


def _to_u16(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)


def _lab_to_unit(img: np.ndarray) -> np.ndarray:
    return (img - np.array([0.0, -128.0, -128.0])) / np.array([100.0, 255.0, 255.0])


def _unit_to_lab(img: np.ndarray) -> np.ndarray:
    return img * np.array([100.0, 255.0, 255.0]) + np.array([0.0, -128.0, -128.0])


def write_image16(path, img: np.ndarray) -> None:
    """Write a [0, 1] image as 16-bit PNG or PPM/PGM (RGB channel order)."""
    data = _to_u16(np.asarray(img, dtype=np.float64))
    if data.ndim == 3:
        data = data[..., ::-1] if data.shape[-1] == 3 else data[..., 0]
    if not cv2.imwrite(str(path), np.ascontiguousarray(data)):
        raise LightFieldIOError(f"could not write image {path}")


def read_image16(path) -> np.ndarray:
    """Read a 16-bit (or 8-bit) PNG/PPM/PGM into float64 [0, 1], RGB order."""
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise LightFieldIOError(f"could not read image {path}")
    scale = 65535.0 if data.dtype == np.uint16 else 255.0
    img = data.astype(np.float64) / scale
    if img.ndim == 3:
        img = img[..., :3][..., ::-1]
    return img


def save_lightfield(lf: LightField, directory, fmt: str = "png") -> Path:
    """Write ``lf`` as a manifest plus one 16-bit image per valid view."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = {"png": ".png", "ppm": ".ppm"}[fmt]
    if lf.channels == 1 and ext == ".ppm":
        ext = ".pgm"
    for u, v in lf.valid_views():
        img = lf.view(u, v)
        if lf.colour_space is ColourSpace.LAB:
            img = _lab_to_unit(img)
        write_image16(directory / _view_name(u, v, ext), img)
    manifest = {
        "rows": lf.U,
        "cols": lf.V,
        "height": lf.height,
        "width": lf.width,
        "channels": lf.channels,
        "colour_space": lf.colour_space.value,
        "white_point": [float(x) for x in lf.white_point],
        "valid": lf.valid.astype(int).tolist(),
        "format": ext.lstrip("."),
        "meta": lf.meta,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_lightfield(directory) -> LightField:
    """Read a light field written by :func:`save_lightfield`.

    Views flagged invalid in the manifest may be absent on disk; they load as
    zeros. A missing valid view, inconsistent image sizes or an invalid centre
    view raise :class:`LightFieldIOError`.
    """
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.is_file():
        raise LightFieldIOError(f"missing {MANIFEST} in {directory}")
    m = json.loads(mpath.read_text())
    U, V = int(m["rows"]), int(m["cols"])
    valid = np.asarray(m.get("valid", np.ones((U, V), int).tolist()), dtype=bool)
    if valid.shape != (U, V):
        raise LightFieldIOError(f"validity mask shape {valid.shape} != ({U}, {V})")
    if not valid[U // 2, V // 2]:
        raise LightFieldIOError("centre view is flagged invalid")
    space = ColourSpace(m.get("colour_space", "LinearRGB"))
    ext = "." + m.get("format", "png")
    if int(m.get("channels", 3)) == 1 and ext == ".ppm":
        ext = ".pgm"

    views = None
    shape = None
    for u in range(U):
        for v in range(V):
            if not valid[u, v]:
                continue
            path = directory / _view_name(u, v, ext)
            if not path.is_file():
                raise LightFieldIOError(f"view ({u}, {v}) is flagged valid but {path.name} is missing")
            img = read_image16(path)
            if img.ndim == 2:
                img = img[..., None]
            if shape is None:
                shape = img.shape
                views = np.zeros((U, V) + shape)
            elif img.shape != shape:
                raise LightFieldIOError(
                    f"view ({u}, {v}) has shape {img.shape}, expected {shape}"
                )
            views[u, v] = _unit_to_lab(img) if space is ColourSpace.LAB else img
    if "height" in m and (shape[0], shape[1]) != (m["height"], m["width"]):
        raise LightFieldIOError("image size disagrees with manifest")
    return LightField(
        views=views,
        valid=valid,
        colour_space=space,
        white_point=m.get("white_point", D65.tolist()),
        meta=m.get("meta", {}),
    )
