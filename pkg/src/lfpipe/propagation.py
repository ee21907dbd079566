"""Order and palette selection for recolouring every view of a light field."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import ColourSpace, LightField
from .correspondence import CorrespondenceError, MatchConfig, merge_correspondences, patch_match
from .transfer import InsufficientCorrespondences, TpsTransform, TransferConfig, fit_transfer, recolour_image

logger = logging.getLogger(__name__)

View = tuple[int, int]


class PropagationScheme(str, Enum):
    CENTRE = "centre"
    PROP = "prop"
    PROP_CENTRE = "prop+centre"


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Step:
    target: View
    palettes: tuple[View, ...]
    palette_state: tuple[str, ...]  # "original" for the centre view, "corrected" otherwise

    def __str__(self):
        pal = ", ".join(f"{p}[{s}]" for p, s in zip(self.palettes, self.palette_state))
        return f"{self.target} <- {pal}"


@dataclass(frozen=True)
class RecolourPlan:
    scheme: PropagationScheme
    centre: View
    steps: tuple[Step, ...]

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def dump(self) -> str:
        lines = [f"# scheme={self.scheme.value} centre={self.centre} steps={len(self.steps)}"]
        lines += [str(s) for s in self.steps]
        return "\n".join(lines) + "\n"

    def depths(self) -> dict[View, int]:
        """Dependency depth of each target; steps at equal depth are independent."""
        depth: dict[View, int] = {self.centre: 0}
        for step in self.steps:
            depth[step.target] = 1 + max(depth[p] for p in step.palettes)
        del depth[self.centre]
        return depth


def _sign(x: int) -> int:
    return (x > 0) - (x < 0)


def inner_chain(view: View, centre: View) -> list[View]:
    """Views between ``view`` and the centre along the propagation path, nearest first.

    Column views step vertically towards the centre; other views step along
    their row to the centre column, then up or down the column.
    """
    (u, v), (uc, vc) = view, centre
    chain = []
    while (u, v) != (uc, vc):
        if v != vc:
            v -= _sign(v - vc)
        else:
            u -= _sign(u - uc)
        chain.append((u, v))
    return chain


def propagation_order(U: int, V: int) -> list[View]:
    """Centre column outward (up before down), then rows outward from the centre row.

    Within a row, views are visited by distance from the centre column, left
    before right.
    """
    uc, vc = U // 2, V // 2
    rows = sorted(range(U), key=lambda u: (abs(u - uc), u))
    cols = sorted((v for v in range(V) if v != vc), key=lambda v: (abs(v - vc), v))
    order = [(u, vc) for u in rows if u != uc]
    order += [(u, v) for u in rows for v in cols]
    return order


def build_plan(U: int, V: int, valid_mask, scheme) -> RecolourPlan:
    scheme = PropagationScheme(scheme)
    valid = np.asarray(valid_mask, dtype=bool)
    if valid.shape != (U, V):
        raise PlanError(f"valid mask shape {valid.shape} != ({U}, {V})")
    centre = (U // 2, V // 2)
    if not valid[centre]:
        raise PlanError("centre view must be valid")

    steps = []
    for view in propagation_order(U, V):
        if not valid[view]:
            continue
        if scheme is PropagationScheme.CENTRE:
            steps.append(Step(view, (centre,), ("original",)))
            continue
        inner = next(p for p in inner_chain(view, centre) if valid[p])
        if inner == centre:
            steps.append(Step(view, (centre,), ("original",)))
        elif scheme is PropagationScheme.PROP:
            steps.append(Step(view, (inner,), ("corrected",)))
        else:
            steps.append(Step(view, (inner, centre), ("corrected", "original")))
    return RecolourPlan(scheme, centre, tuple(steps))


@dataclass
class RecolourResult:
    lightfield: LightField
    transforms: dict[View, TpsTransform]
    correspondences: dict[View, int]
    plan: RecolourPlan


def _recolour_step(views, step: Step, valid, centre, match_cfg, transfer_cfg, white_point):
    target = views[step.target]
    palettes = []
    for p in step.palettes:
        if not valid[p]:
            # the palette failed earlier; fall back to the next valid inner view
            p = next(q for q in inner_chain(step.target, centre) if valid[q])
        palettes.append(p)
    corr = None
    for p in dict.fromkeys(palettes):
        c = patch_match(target, views[p], match_cfg, white_point=white_point)
        corr = c if corr is None else merge_correspondences(corr, c)
    tps = fit_transfer(corr, transfer_cfg)
    out, clipped = recolour_image(target, tps, white_point)
    return out, tps, corr.n, clipped


def recolour_lightfield(lf: LightField, scheme="prop", transfer_cfg: TransferConfig | None = None,
                        match_cfg: MatchConfig | None = None, workers: int = 1) -> RecolourResult:
    """Recolour every valid view towards the centre view's colours.

    Views whose correspondence set is too small are marked invalid and left
    untouched. The centre view is never modified.
    """
    if lf.colour_space is not ColourSpace.LINEAR_RGB or lf.channels != 3:
        raise ValueError("recolouring expects a 3-channel linear RGB light field")
    transfer_cfg = transfer_cfg or TransferConfig()
    match_cfg = match_cfg or MatchConfig()
    plan = build_plan(lf.U, lf.V, lf.valid, scheme)
    views = lf.views.copy()
    valid = lf.valid.copy()
    transforms: dict[View, TpsTransform] = {}
    counts: dict[View, int] = {}

    def run(step):
        try:
            return step, _recolour_step(views, step, valid, plan.centre, match_cfg, transfer_cfg, lf.white_point)
        except (InsufficientCorrespondences, CorrespondenceError) as exc:
            return step, exc

    def commit(step, result):
        if isinstance(result, Exception):
            logger.warning("view %s left uncorrected and marked invalid: %s", step.target, result)
            valid[step.target] = False
            return
        out, tps, n, clipped = result
        views[step.target] = out
        transforms[step.target] = tps
        counts[step.target] = n
        if clipped:
            logger.debug("view %s: %d out-of-gamut pixels clipped", step.target, clipped)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        # steps of equal dependency depth only read views finished at lower depths
        depth = plan.depths()
        with ThreadPoolExecutor(workers) as pool:
            for d in sorted(set(depth.values())):
                batch = [s for s in plan.steps if depth[s.target] == d]
                for step, result in pool.map(run, batch):
                    commit(step, result)
    else:
        for step in plan.steps:
            commit(*run(step))

    history = list(lf.meta.get("history", [])) + ["recolour"]
    meta = dict(lf.meta, history=history, scheme=plan.scheme.value)
    out = lf.with_views(views=views, valid=valid, meta=meta)
    return RecolourResult(out, transforms, counts, plan)
