"""Sparse colour correspondences between two views.

A coarse-to-fine PatchMatch over a regular seed grid: random initialisation
at the coarsest pyramid level, then alternating neighbour propagation and
shrinking random search on sum-of-absolute-difference patch costs, refined
level by level. A forward-backward consistency check removes unreliable seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import as_image, luminance, rgb_to_lab

N_MIN = 50


class CorrespondenceError(ValueError):
    pass


@dataclass(frozen=True)
class MatchConfig:
    seed_stride: int = 8
    patch_radius: int = 4
    levels: int = 3
    search_radius: int = 16
    fb_threshold: float = 2.0
    iterations: int = 4
    seed: int = 0
    gain_normalize: bool = True


@dataclass
class CorrespondenceSet:
    """Matched positions (x, y) and their LAB colours.

    ``displacement`` optionally keeps the full forward seed field (including
    rejected seeds) for debugging.
    """

    pos_t: np.ndarray
    pos_p: np.ndarray
    c_t: np.ndarray
    c_p: np.ndarray
    shape: tuple[int, int]
    displacement: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.pos_t = np.asarray(self.pos_t, dtype=np.float64).reshape(-1, 2)
        self.pos_p = np.asarray(self.pos_p, dtype=np.float64).reshape(-1, 2)
        self.c_t = np.asarray(self.c_t, dtype=np.float64).reshape(-1, 3)
        self.c_p = np.asarray(self.c_p, dtype=np.float64).reshape(-1, 3)
        self.shape = tuple(int(s) for s in self.shape)
        n = len(self.c_t)
        if not (len(self.pos_t) == len(self.pos_p) == len(self.c_p) == n):
            raise CorrespondenceError("correspondence arrays differ in length")
        h, w = self.shape
        for pos in (self.pos_t, self.pos_p):
            if n and (pos.min() < 0 or np.any(pos[:, 0] > w - 1) or np.any(pos[:, 1] > h - 1)):
                raise CorrespondenceError("correspondence position out of bounds")

    @property
    def n(self) -> int:
        return len(self.c_t)

    def sufficient(self, n_min: int = N_MIN) -> bool:
        return self.n >= n_min

    @classmethod
    def empty(cls, shape) -> "CorrespondenceSet":
        z = np.zeros((0, 2))
        return cls(z, z, np.zeros((0, 3)), np.zeros((0, 3)), shape)

    def dump_displacement(self, path) -> None:
        """Write the seed displacement field as text: a ``rows cols`` header, then one ``dx dy`` line per seed."""
        if self.displacement is None:
            raise CorrespondenceError("no displacement field recorded")
        d = self.displacement
        lines = [f"{d.shape[0]} {d.shape[1]}"]
        lines += [f"{dx:.6g} {dy:.6g}" for dx, dy in d.reshape(-1, 2)]
        Path(path).write_text("\n".join(lines) + "\n")


def load_displacement(path) -> np.ndarray:
    rows = Path(path).read_text().split("\n")
    gy, gx = (int(x) for x in rows[0].split())
    data = np.array([[float(v) for v in r.split()] for r in rows[1:] if r.strip()])
    return data.reshape(gy, gx, 2)


def merge_correspondences(a: CorrespondenceSet, b: CorrespondenceSet) -> CorrespondenceSet:
    if a.shape != b.shape:
        raise CorrespondenceError(f"cannot merge sets for images {a.shape} and {b.shape}")
    return CorrespondenceSet(
        np.concatenate([a.pos_t, b.pos_t]),
        np.concatenate([a.pos_p, b.pos_p]),
        np.concatenate([a.c_t, b.c_t]),
        np.concatenate([a.c_p, b.c_p]),
        a.shape,
    )


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        p = pyr[-1]
        h, w = (p.shape[0] // 2) * 2, (p.shape[1] // 2) * 2
        p = p[:h, :w]
        pyr.append(0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2]))
    return pyr


class _Matcher:
    """PatchMatch state for one direction on one pyramid level."""

    def __init__(self, src: np.ndarray, dst: np.ndarray, radius: int):
        self.src, self.dst = src, dst
        self.h, self.w = src.shape[:2]
        r = np.arange(-radius, radius + 1)
        oy, ox = np.meshgrid(r, r, indexing="ij")
        self.oy, self.ox = oy.ravel(), ox.ravel()

    def patches(self, img, pos):
        y = np.clip(pos[:, 1, None] + self.oy, 0, self.h - 1)
        x = np.clip(pos[:, 0, None] + self.ox, 0, self.w - 1)
        return img[y, x]

    def clamp(self, pos, disp):
        end = np.stack([np.clip(pos[:, 0] + disp[:, 0], 0, self.w - 1),
                        np.clip(pos[:, 1] + disp[:, 1], 0, self.h - 1)], axis=1)
        return end - pos

    def cost(self, src_patches, pos, disp):
        return np.abs(src_patches - self.patches(self.dst, pos + disp)).sum(axis=(1, 2))


def _match_direction(src, dst, pos0, grid_shape, cfg: MatchConfig, rng) -> np.ndarray:
    """Displacements (dx, dy) at finest level for seeds ``pos0`` (N, 2)."""
    src_pyr = _pyramid(src, cfg.levels)
    dst_pyr = _pyramid(dst, cfg.levels)
    disp = None
    gy, gx = grid_shape
    for level in range(cfg.levels - 1, -1, -1):
        scale = 2**level
        m = _Matcher(src_pyr[level], dst_pyr[level], cfg.patch_radius)
        pos = np.stack([np.clip(pos0[:, 0] // scale, 0, m.w - 1), np.clip(pos0[:, 1] // scale, 0, m.h - 1)], axis=1)
        sp = m.patches(m.src, pos)
        radius = max(1, int(round(cfg.search_radius / scale)))
        if disp is None:
            disp = m.clamp(pos, rng.integers(-radius, radius + 1, size=pos.shape))
            zero = np.zeros_like(disp)
            c_rand, c_zero = m.cost(sp, pos, disp), m.cost(sp, pos, zero)
            take = c_zero <= c_rand
            disp[take] = zero[take]
            cost = np.where(take, c_zero, c_rand)
        else:
            disp = m.clamp(pos, disp * 2)
            cost = m.cost(sp, pos, disp)

        for it in range(cfg.iterations):
            # propagation from the 4-neighbours on the seed grid, alternating scan sense
            order = [(0, 1), (1, 0), (0, -1), (-1, 0)] if it % 2 == 0 else [(0, -1), (-1, 0), (0, 1), (1, 0)]
            for dy, dx in order:
                g = disp.reshape(gy, gx, 2)
                # wrapped rows/columns only add harmless extra proposals
                shifted = np.roll(g, (dy, dx), axis=(0, 1)).reshape(-1, 2)
                cand = m.clamp(pos, shifted)
                c = m.cost(sp, pos, cand)
                better = c < cost
                disp[better], cost[better] = cand[better], c[better]
            # random search with exponentially shrinking radius
            r = radius
            while r >= 1:
                cand = m.clamp(pos, disp + rng.integers(-r, r + 1, size=disp.shape))
                c = m.cost(sp, pos, cand)
                better = c < cost
                disp[better], cost[better] = cand[better], c[better]
                r //= 2
    return disp


def _seed_grid(h: int, w: int, stride: int):
    ys = np.arange(stride // 2, h, stride)
    xs = np.arange(stride // 2, w, stride)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1), (len(ys), len(xs)), ys, xs


def _mean3x3(img: np.ndarray, pos: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    acc = np.zeros((len(pos), img.shape[2]))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            acc += img[np.clip(pos[:, 1] + dy, 0, h - 1), np.clip(pos[:, 0] + dx, 0, w - 1)]
    return acc / 9.0


def patch_match(target, palette, cfg: MatchConfig | None = None, white_point=None) -> CorrespondenceSet:
    """Sparse target-to-palette correspondences with forward-backward filtering.

    Both images are linear RGB of equal size. Colours are 3x3 means around the
    matched positions, returned in LAB.
    """
    cfg = cfg or MatchConfig()
    t = as_image(target, channels=3)
    p = as_image(palette, channels=3)
    if t.shape != p.shape:
        raise CorrespondenceError(f"image sizes differ: {t.shape} vs {p.shape}")
    h, w = t.shape[:2]
    coarse = min(h, w) // 2 ** (cfg.levels - 1)
    if coarse < 2 * cfg.patch_radius + 1:
        raise CorrespondenceError(f"{h}x{w} images are too small for {cfg.levels} pyramid levels")

    tm, pm = t, p
    if cfg.gain_normalize:
        lt, lp = luminance(t).mean(), luminance(p).mean()
        if lt > 0 and lp > 0:
            tm = t * (lp / lt)

    rng = np.random.default_rng(cfg.seed)
    seeds, gshape, ys, xs = _seed_grid(h, w, cfg.seed_stride)
    fwd = _match_direction(tm, pm, seeds, gshape, cfg, rng)
    bwd = _match_direction(pm, tm, seeds, gshape, cfg, rng)

    end = seeds + fwd
    # backward displacement of the seed nearest to each forward endpoint
    iy = np.clip(np.round((end[:, 1] - ys[0]) / cfg.seed_stride).astype(int), 0, len(ys) - 1)
    ix = np.clip(np.round((end[:, 0] - xs[0]) / cfg.seed_stride).astype(int), 0, len(xs) - 1)
    back = bwd.reshape(gshape + (2,))[iy, ix]
    err = np.hypot(*(fwd + back).T)
    keep = err <= cfg.fb_threshold

    pos_t, pos_p = seeds[keep], end[keep]
    kw = {} if white_point is None else {"white_point": white_point}
    c_t = rgb_to_lab(_mean3x3(t, pos_t), **kw) if keep.any() else np.zeros((0, 3))
    c_p = rgb_to_lab(_mean3x3(p, pos_p), **kw) if keep.any() else np.zeros((0, 3))
    return CorrespondenceSet(pos_t, pos_p, c_t, c_p, (h, w), displacement=fwd.reshape(gshape + (2,)).astype(float))
