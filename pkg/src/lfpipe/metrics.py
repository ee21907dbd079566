"""Colour-difference and noise-level metrics for light fields."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage, stats

from .core import D65, RGB_TO_XYZ, LightField, as_image, rgb_to_lab, rgb_to_xyz, xyz_to_lab

# XYZ -> opponent (luminance, red-green, blue-yellow)
XYZ_TO_OPP = np.array([
    [0.279, 0.720, -0.107],
    [-0.449, 0.290, -0.077],
    [0.086, -0.590, 0.501],
])
OPP_TO_XYZ = np.linalg.inv(XYZ_TO_OPP)

# per opponent channel: (weights, spreads in degrees); weights sum to one
CSF_KERNELS = (
    ((1.00327, 0.114416, -0.117686), (0.05, 0.225, 7.0)),
    ((0.616725, 0.383275), (0.0685, 0.826)),
    ((0.567885, 0.432115), (0.0920, 0.6451)),
)

HIST_RANGES = ((0.0, 100.0), (-128.0, 127.0), (-128.0, 127.0))


def _csf_filter(channel: np.ndarray, weights, spreads, spd: float) -> np.ndarray:
    out = np.zeros_like(channel)
    for w, s in zip(weights, spreads):
        # exp(-r^2 / s^2) is a Gaussian with std s / sqrt(2)
        out += w * ndimage.gaussian_filter(channel, s * spd / np.sqrt(2.0), mode="reflect")
    return out


def scielab_lab(img: np.ndarray, samples_per_degree: float = 23.0, white_point=D65) -> np.ndarray:
    """Spatially filtered LAB image of a linear RGB image."""
    img = as_image(img, channels=3)
    opp = rgb_to_xyz(img) @ XYZ_TO_OPP.T
    filt = np.stack([_csf_filter(opp[..., k], w, s, samples_per_degree)
                     for k, (w, s) in enumerate(CSF_KERNELS)], axis=-1)
    return xyz_to_lab(filt @ OPP_TO_XYZ.T, white_point)


def scielab(img_a, img_b, samples_per_degree: float = 23.0, white_point=D65) -> float:
    """Mean spatial CIELAB difference between two linear RGB images."""
    a, b = as_image(img_a, channels=3), as_image(img_b, channels=3)
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")
    if samples_per_degree <= 0:
        raise ValueError("samples_per_degree must be positive")
    if np.array_equal(a, b):
        return 0.0
    la = scielab_lab(a, samples_per_degree, white_point)
    lb = scielab_lab(b, samples_per_degree, white_point)
    return float(np.sqrt(((la - lb) ** 2).sum(-1)).mean())


def delta_e(lab_a, lab_b) -> np.ndarray:
    return np.sqrt(((np.asarray(lab_a) - np.asarray(lab_b)) ** 2).sum(-1))


def lab_histogram(channel: np.ndarray, lo: float, hi: float, bins: int = 25) -> np.ndarray:
    counts, _ = np.histogram(np.clip(channel, lo, hi), bins=bins, range=(lo, hi))
    return counts / counts.sum()


def chi2_distance(p: np.ndarray, q: np.ndarray) -> float:
    s = p + q
    nz = s > 0
    return float((((p - q) ** 2)[nz] / s[nz]).sum())


def hist_chi2(lab_a, lab_b, bins: int = 25) -> float:
    """Mean symmetric chi-square distance of the L, a and b histograms."""
    a = np.asarray(lab_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(lab_b, dtype=np.float64).reshape(-1, 3)
    if not len(a) or not len(b):
        raise ValueError("empty image")
    d = [chi2_distance(lab_histogram(a[:, k], lo, hi, bins), lab_histogram(b[:, k], lo, hi, bins))
         for k, (lo, hi) in enumerate(HIST_RANGES)]
    return float(np.mean(d))


def _gradient_operator(p: int) -> np.ndarray:
    """Rows map a flattened p x p patch to its central-difference gradients."""
    rows = []
    for axis in (0, 1):
        for i in range(p):
            for j in range(1, p - 1):
                r = np.zeros((p, p))
                if axis == 0:
                    r[i, j - 1], r[i, j + 1] = -0.5, 0.5
                else:
                    r[j - 1, i], r[j + 1, i] = -0.5, 0.5
                rows.append(r.ravel())
    return np.array(rows)


def estimate_noise(img, patch_size: int = 7, confidence: float = 1 - 1e-6, max_iter: int = 10,
                   min_samples: int = 4) -> float:
    """Blind AWGN standard deviation from weak-texture patches.

    Colour images are reduced to a unit-norm luminance combination so that
    equal per-channel noise keeps its standard deviation.
    """
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 3:
        w = RGB_TO_XYZ[1] / np.linalg.norm(RGB_TO_XYZ[1]) if x.shape[2] == 3 else np.full(x.shape[2], x.shape[2] ** -0.5)
        x = x @ w
    if min(x.shape) < 32:
        raise ValueError("image must be at least 32x32")
    if patch_size < 3:
        raise ValueError("patch_size must be at least 3")
    p = patch_size
    patches = sliding_window_view(x, (p, p)).reshape(-1, p * p)
    d = _gradient_operator(p)
    dtd = d.T @ d
    r = p * p
    tau0 = stats.gamma.ppf(confidence, r / 2.0, scale=2.0 * np.trace(dtd) / r)
    texture = np.einsum("ij,jk,ik->i", patches, dtd, patches)

    def min_eig(sel):
        # the smallest sample eigenvalue of white noise sits near
        # sigma^2 (1 - sqrt(r / n))^2 for n samples; undo that shrinkage
        c = np.cov(sel, rowvar=False)
        lam = max(float(np.linalg.eigvalsh(c)[0]), 0.0)
        return lam / (1.0 - np.sqrt(r / len(sel))) ** 2

    var = min_eig(patches)
    for _ in range(max_iter):
        sel = patches[texture < var * tau0]
        if len(sel) < min_samples * r:
            break
        new = min_eig(sel)
        if abs(new - var) <= 1e-12 + 1e-6 * var:
            var = new
            break
        var = new
    return float(np.sqrt(var))


@dataclass
class ReportConfig:
    samples_per_degree: float = 23.0
    bins: int = 25
    patch_size: int = 7


@dataclass
class MetricReport:
    per_view: dict = field(default_factory=dict)  # (u, v) -> {"scielab", "hist_chi2", "noise_sigma"}
    aggregate: dict = field(default_factory=dict)
    centre: tuple = (0, 0)

    COLUMNS = ("view", "scielab", "hist_chi2", "noise_sigma")

    def rows(self):
        for view in sorted(self.per_view):
            m = self.per_view[view]
            yield (f"{view[0]},{view[1]}", m["scielab"], m["hist_chi2"], m["noise_sigma"])

    def to_table(self) -> str:
        lines = [f"{'view':>8} {'scielab':>10} {'hist_chi2':>10} {'noise':>10}"]
        for name, s, h, n in self.rows():
            lines.append(f"{name:>8} {s:10.4f} {h:10.5f} {n:10.6f}")
        a = self.aggregate
        lines.append(f"{'mean':>8} {a['scielab']:10.4f} {a['hist_chi2']:10.5f} {a['noise_sigma']:10.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for name, s, h, n in self.rows():
            w.writerow([name, f"{s:.10g}", f"{h:.10g}", f"{n:.10g}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "centre": list(self.centre),
            "per_view": {f"{u},{v}": m for (u, v), m in sorted(self.per_view.items())},
            "aggregate": self.aggregate,
        }


def lightfield_report(lf: LightField, cfg: ReportConfig | None = None, workers: int = 1) -> MetricReport:
    """Per-view distances to the centre view and noise estimates.

    Distance means skip the centre view; the noise mean includes it.
    """
    cfg = cfg or ReportConfig()
    centre = (lf.U // 2, lf.V // 2)
    ref = lf.centre_view()
    ref_lab = rgb_to_lab(ref, lf.white_point)

    def one(view):
        img = lf.views[view]
        return view, {
            "scielab": scielab(img, ref, cfg.samples_per_degree, lf.white_point),
            "hist_chi2": hist_chi2(rgb_to_lab(img, lf.white_point), ref_lab, cfg.bins),
            "noise_sigma": estimate_noise(img, cfg.patch_size),
        }

    views = lf.valid_views()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, views))
    else:
        results = [one(v) for v in views]
    per_view = dict(results)
    others = [m for v, m in per_view.items() if v != centre]
    agg = {
        "scielab": float(np.mean([m["scielab"] for m in others])) if others else 0.0,
        "hist_chi2": float(np.mean([m["hist_chi2"] for m in others])) if others else 0.0,
        "noise_sigma": float(np.mean([m["noise_sigma"] for m in per_view.values()])),
    }
    return MetricReport(per_view, agg, centre)


def comparison_table(reports: dict) -> str:
    """One row per labelled report with its aggregate metrics."""
    lines = [f"{'run':>20} {'scielab':>10} {'hist_chi2':>10} {'noise':>10}"]
    for name, rep in reports.items():
        a = rep.aggregate
        lines.append(f"{name:>20} {a['scielab']:10.4f} {a['hist_chi2']:10.5f} {a['noise_sigma']:10.6f}")
    return "\n".join(lines) + "\n"
