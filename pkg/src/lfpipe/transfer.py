"""Colour transfer by Gaussian-mixture registration with a thin plate spline.

A transform ``phi`` maps target colours to palette colours in CIELAB:

    phi(c) = A c + t + sum_i W_i k(|c - p_i|),   k(r) = -r

with control points ``p_i`` on a fixed lattice and ``W`` constrained to
``sum_i W_i = 0`` and ``sum_i W_i p_i^T = 0``. Parameters minimise

    C = -(1/n^2) sum_k N(0; phi(c_t^k) - c_p^k, 2 h^2 I) + lambda tr(W^T K W)

over a decreasing bandwidth schedule ``h``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial.distance import cdist

from .core import D65, as_image, lab_to_rgb, rgb_to_lab
from .correspondence import N_MIN, CorrespondenceSet


class TransferError(ValueError):
    pass


class InsufficientCorrespondences(TransferError):
    pass


@dataclass(frozen=True)
class TransferConfig:
    h_schedule: tuple = (20.0, 10.0, 5.0, 2.0)
    inner_iters: int = 50
    control_grid: tuple = (6, 6, 6)
    lambda_reg: float = 1e-3
    n_min: int = N_MIN

    def __post_init__(self):
        h = np.asarray(self.h_schedule, dtype=float)
        if h.size == 0 or np.any(h <= 0) or np.any(np.diff(h) >= 0):
            raise TransferError("h_schedule must be strictly decreasing and positive")
        if self.lambda_reg < 0:
            raise TransferError("lambda_reg must be non-negative")
        object.__setattr__(self, "h_schedule", tuple(float(x) for x in h))
        object.__setattr__(self, "control_grid", tuple(int(x) for x in self.control_grid))


def kernel(r):
    return -r


@dataclass
class TpsTransform:
    control_points: np.ndarray
    W: np.ndarray
    A: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=float).reshape(-1, 3)
        self.W = np.asarray(self.W, dtype=float).reshape(-1, 3)
        self.A = np.asarray(self.A, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        if self.W.shape != self.control_points.shape:
            raise TransferError("W must have one row per control point")

    @classmethod
    def identity(cls, control_points) -> "TpsTransform":
        cp = np.asarray(control_points, dtype=float).reshape(-1, 3)
        return cls(cp, np.zeros_like(cp))

    def kernel_matrix(self, colours=None) -> np.ndarray:
        a = self.control_points if colours is None else np.asarray(colours, dtype=float).reshape(-1, 3)
        return kernel(cdist(a, self.control_points))

    def __call__(self, colours) -> np.ndarray:
        return tps_apply(self, colours)

    def copy(self) -> "TpsTransform":
        return TpsTransform(self.control_points.copy(), self.W.copy(), self.A.copy(), self.t.copy())

    def to_dict(self) -> dict:
        return {
            "control_points": self.control_points.tolist(),
            "W": self.W.tolist(),
            "A": self.A.tolist(),
            "t": self.t.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TpsTransform":
        return cls(d["control_points"], d["W"], d["A"], d["t"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "TpsTransform":
        return cls.from_dict(json.loads(Path(path).read_text()))


class TpsGradient(NamedTuple):
    W: np.ndarray
    A: np.ndarray
    t: np.ndarray


def tps_apply(tps: TpsTransform, colours) -> np.ndarray:
    """Evaluate ``phi`` on one LAB colour or an ``(..., 3)`` array of them."""
    c = np.asarray(colours, dtype=float)
    flat = c.reshape(-1, 3)
    out = flat @ tps.A.T + tps.t + tps.kernel_matrix(flat) @ tps.W
    return out.reshape(c.shape)


def control_lattice(colours, counts=(6, 6, 6), pad: float = 1.0) -> np.ndarray:
    """Regular lattice of control points spanning the bounding box of ``colours``."""
    c = np.asarray(colours, dtype=float).reshape(-1, 3)
    lo, hi = c.min(axis=0), c.max(axis=0)
    mid, half = 0.5 * (lo + hi), np.maximum(0.5 * (hi - lo), pad)
    axes = [np.linspace(m - h, m + h, n) for m, h, n in zip(mid, half, counts)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([x.ravel() for x in g], axis=1)


def side_condition_projector(control_points) -> np.ndarray:
    """Orthogonal projector onto ``{W : sum W_i = 0, sum W_i p_i^T = 0}``."""
    cp = np.asarray(control_points, dtype=float).reshape(-1, 3)
    P = np.hstack([np.ones((len(cp), 1)), cp])
    return np.eye(len(cp)) - P @ np.linalg.pinv(P)


def _gauss(r2, h):
    return (4.0 * np.pi * h * h) ** -1.5 * np.exp(-r2 / (4.0 * h * h))


def gmm_cost(tps: TpsTransform, corr: CorrespondenceSet, h: float, lambda_reg: float = 0.0) -> float:
    """Negative paired Gaussian overlap of transformed target and palette colours."""
    if not h > 0:
        raise TransferError("bandwidth h must be positive")
    n = corr.n
    if n < 1:
        raise InsufficientCorrespondences("gmm_cost needs at least one correspondence")
    res = tps_apply(tps, corr.c_t) - corr.c_p
    data = -_gauss((res**2).sum(axis=1), h).sum() / n**2
    if lambda_reg:
        data += lambda_reg * np.trace(tps.W.T @ tps.kernel_matrix() @ tps.W)
    return float(data)


def gmm_cost_gradient(tps: TpsTransform, corr: CorrespondenceSet, h: float, lambda_reg: float = 0.0) -> TpsGradient:
    """Analytic gradient of :func:`gmm_cost` with respect to ``(W, A, t)``."""
    if not h > 0:
        raise TransferError("bandwidth h must be positive")
    n = corr.n
    if n < 1:
        raise InsufficientCorrespondences("gmm_cost needs at least one correspondence")
    Kc = tps.kernel_matrix(corr.c_t)
    res = corr.c_t @ tps.A.T + tps.t + Kc @ tps.W - corr.c_p
    g = (_gauss((res**2).sum(axis=1), h) / (2.0 * h * h * n**2))[:, None] * res
    dW = Kc.T @ g
    if lambda_reg:
        dW = dW + 2.0 * lambda_reg * tps.kernel_matrix() @ tps.W
    return TpsGradient(dW, g.T @ corr.c_t, g.sum(axis=0))


class _Problem:
    """Cost and gradient in centred, scaled colour coordinates.

    With ``x' = (x - mu) / s`` the transform keeps ``A`` and ``W`` while
    ``t = s t' + mu - A mu``; the objective equals ``s^3`` times the LAB one
    when the regulariser weight is scaled by ``s^4``.
    """

    def __init__(self, corr: CorrespondenceSet, cp: np.ndarray, lambda_reg: float):
        self.mu = corr.c_t.mean(axis=0)
        self.s = max(float(corr.c_t.std()), 1.0)
        self.ct = (corr.c_t - self.mu) / self.s
        self.cp_col = (corr.c_p - self.mu) / self.s
        self.ctrl = (cp - self.mu) / self.s
        self.Kc = kernel(cdist(self.ct, self.ctrl))
        self.K = kernel(cdist(self.ctrl, self.ctrl))
        self.lam = lambda_reg * self.s**4
        self.n = corr.n
        self.Q = side_condition_projector(self.ctrl)

    def unpack(self, x):
        m = len(self.ctrl)
        return x[: 3 * m].reshape(m, 3), x[3 * m : 3 * m + 9].reshape(3, 3), x[3 * m + 9 :]

    def pack(self, W, A, t):
        return np.concatenate([W.ravel(), A.ravel(), t.ravel()])

    def from_tps(self, tps: TpsTransform):
        t_scaled = (tps.t - self.mu + tps.A @ self.mu) / self.s
        return self.pack(tps.W, tps.A, t_scaled)

    def to_tps(self, x, control_points) -> TpsTransform:
        W, A, ts = self.unpack(x)
        return TpsTransform(control_points, W.copy(), A.copy(), self.s * ts + self.mu - A @ self.mu)

    def value_grad(self, x, h):
        W, A, t = self.unpack(x)
        res = self.ct @ A.T + t + self.Kc @ W - self.cp_col
        gk = _gauss((res**2).sum(axis=1), h)
        f = -gk.sum() / self.n**2
        g = (gk / (2.0 * h * h * self.n**2))[:, None] * res
        KW = self.K @ W
        f += self.lam * float((W * KW).sum())
        dW = self.Kc.T @ g + 2.0 * self.lam * KW
        return f, self.pack(self.Q @ dW, g.T @ self.ct, g.sum(axis=0))

    def value(self, x, h):
        return self.value_grad(x, h)[0]

    def project(self, x):
        W, A, t = self.unpack(x)
        return self.pack(self.Q @ W, A, t)


def fit_transfer(corr: CorrespondenceSet, cfg: TransferConfig | None = None,
                 callback: Callable[[int, float, float], None] | None = None) -> TpsTransform:
    """Fit the colour transform by annealed gradient descent.

    Each bandwidth stage runs ``inner_iters`` iterations; an iteration takes
    one steepest-descent step on the affine block ``(A, t)`` and one on the
    kernel weights ``W``, each with its own Armijo backtracking search, so the
    cost never increases within a stage. The blocks are stepped separately
    because the regulariser makes ``W`` far stiffer than the affine part. The
    side conditions on ``W`` are re-imposed by projection after every step.
    ``callback(stage, h, cost)`` receives the LAB-space cost at the start of
    each stage and after every accepted step.
    """
    cfg = cfg or TransferConfig()
    if corr.n < cfg.n_min:
        raise InsufficientCorrespondences(f"{corr.n} correspondences, need at least {cfg.n_min}")
    cp = control_lattice(corr.c_t, cfg.control_grid)
    prob = _Problem(corr, cp, cfg.lambda_reg)
    x = prob.from_tps(TpsTransform.identity(cp))
    to_lab = prob.s**-3
    nw = 3 * len(cp)
    blocks = [slice(nw, None), slice(0, nw)]

    for stage, h_lab in enumerate(cfg.h_schedule):
        h = h_lab / prob.s
        f, g = prob.value_grad(x, h)
        if callback:
            callback(stage, h_lab, f * to_lab)
        steps = [None, None]
        for _ in range(cfg.inner_iters):
            moved = False
            for b, sl in enumerate(blocks):
                gb = np.zeros_like(g)
                gb[sl] = g[sl]
                gn2 = float(gb @ gb)
                if gn2 == 0.0 or not np.isfinite(gn2):
                    continue
                step = steps[b] if steps[b] is not None else h / np.sqrt(gn2)
                for _ in range(50):
                    cand = prob.project(x - step * gb)
                    fc = prob.value(cand, h)
                    if fc <= f - 1e-4 * step * gn2:
                        x = cand
                        f, g = prob.value_grad(x, h)
                        moved = True
                        if callback:
                            callback(stage, h_lab, f * to_lab)
                        step *= 2.0
                        break
                    step *= 0.5
                steps[b] = step
            if not moved:
                break
    return prob.to_tps(x, cp)


def recolour_image(img, tps: TpsTransform, white_point=D65, lattice: int = 33) -> tuple[np.ndarray, int]:
    """Recolour a linear RGB image through ``tps`` applied in LAB.

    The transform is evaluated exactly on a ``lattice**3`` grid spanning the
    image's LAB bounding box and interpolated trilinearly per pixel.

    Returns the recoloured image and the number of out-of-gamut pixels clipped.
    """
    rgb = as_image(img, channels=3)
    lab = rgb_to_lab(rgb, white_point)
    flat = lab.reshape(-1, 3)
    lo, hi = flat.min(axis=0), flat.max(axis=0)
    mid, half = 0.5 * (lo + hi), np.maximum(0.5 * (hi - lo), 0.5)
    axes = [np.linspace(m - d, m + d, lattice) for m, d in zip(mid, half)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    values = tps_apply(tps, nodes)
    interp = RegularGridInterpolator(axes, values, method="linear")
    # linspace end points may sit an ulp inside the data range
    q = np.clip(flat, [a[0] for a in axes], [a[-1] for a in axes])
    out_lab = interp(q).reshape(lab.shape)
    return lab_to_rgb(out_lab, white_point)
