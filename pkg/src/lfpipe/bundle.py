"""On-disk RAW capture bundles: sensor mosaic, white image, metadata, ground truth."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import LightField, LightFieldIOError, load_lightfield, read_image16, save_lightfield, write_image16
from .decode import LensletGrid, PlenopticRaw, WhiteBalanceFactors, WhiteImage

RAW_FILE = "raw.png"
WHITE_FILE = "white.png"
META_FILE = "metadata.json"
GT_DIR = "gt"


class BundleError(LightFieldIOError):
    pass


class MissingInput(BundleError):
    pass


@dataclass
class Bundle:
    raw: PlenopticRaw
    white: WhiteImage
    wb: WhiteBalanceFactors
    grid: LensletGrid
    meta: dict
    ground_truth: LightField | None = None


def _write_sensor(path: Path, sensor: np.ndarray) -> dict:
    """Store samples as 16-bit codes; values above one extend the range via ``scale``."""
    scale = max(1.0, float(sensor.max()))
    write_image16(path, sensor / scale)
    return {"black_level": 0.0, "saturation_level": 65535.0 / scale}


def _read_sensor(path: Path) -> np.ndarray:
    if not path.is_file():
        raise MissingInput(f"missing {path.name} in {path.parent}")
    img = read_image16(path)
    if img.ndim != 2:
        raise BundleError(f"{path.name} must be a single-channel mosaic")
    return np.round(img * 65535.0)


def save_bundle(directory, raw: PlenopticRaw, white: WhiteImage, wb: WhiteBalanceFactors, grid: LensletGrid,
                meta: dict | None = None, ground_truth: LightField | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if raw.sensor.shape != white.sensor.shape:
        raise BundleError("RAW and white image differ in size")
    raw_levels = _write_sensor(directory / RAW_FILE, raw.linearized())
    white_levels = _write_sensor(directory / WHITE_FILE, white.linearized())
    h, w = raw.sensor.shape
    doc = {
        "width": w,
        "height": h,
        "bayer_pattern": raw.bayer_pattern,
        "raw_levels": raw_levels,
        "white_levels": white_levels,
        "white_balance": {"r_gain": wb.r_gain, "b_gain": wb.b_gain},
        "grid": grid.to_dict(),
        "meta": meta or {},
    }
    (directory / META_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if ground_truth is not None:
        save_lightfield(ground_truth, directory / GT_DIR)
    return directory


def load_bundle(directory, ground_truth: bool = False) -> Bundle:
    """Read a bundle; missing files raise :class:`MissingInput`."""
    directory = Path(directory)
    mpath = directory / META_FILE
    if not mpath.is_file():
        raise MissingInput(f"missing {META_FILE} in {directory}")
    doc = json.loads(mpath.read_text())
    raw_l, white_l = doc["raw_levels"], doc["white_levels"]
    raw = PlenopticRaw(_read_sensor(directory / RAW_FILE), doc["bayer_pattern"],
                       raw_l["black_level"], raw_l["saturation_level"])
    white = WhiteImage(_read_sensor(directory / WHITE_FILE), doc["bayer_pattern"],
                       white_l["black_level"], white_l["saturation_level"])
    if raw.sensor.shape != (doc["height"], doc["width"]) or white.sensor.shape != raw.sensor.shape:
        raise BundleError("sensor size does not match the metadata")
    gt = None
    if ground_truth and (directory / GT_DIR).is_dir():
        gt = load_lightfield(directory / GT_DIR)
    return Bundle(raw, white, WhiteBalanceFactors(**doc["white_balance"]), LensletGrid(**doc["grid"]),
                  doc.get("meta", {}), gt)
