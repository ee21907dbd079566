"""Command-line front end: simulate, decode, recolour, denoise, report, pipeline."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

from .bundle import MissingInput, load_bundle, save_bundle
from .core import LightFieldIOError, load_lightfield, save_lightfield, srgb_encode, write_image16
from .correspondence import CorrespondenceError, MatchConfig
from .decode import DecodeError, DecodeParams, Interpolation, WhiteBalanceFactors, decode
from .denoise import DenoiseParams, denoise_lightfield
from .metrics import ReportConfig, comparison_table, estimate_noise, lightfield_report
from .propagation import PlanError, PropagationScheme, recolour_lightfield
from .sim import SceneKind, SimParams, grid_for, shift_lightness, simulate_raw, synth_lightfield, synth_white_image
from .transfer import TransferConfig, TransferError

logger = logging.getLogger("lfpipe")

EXIT_OK, EXIT_STAGE, EXIT_INPUT = 0, 1, 2
RUN_FILE = "run.json"

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "simulate": {
        "scene": "TexturedDisparity",
        "views": 9,
        "lens_rows": 64,
        "lens_cols": 64,
        "spacing": 11.0,
        "layout": "Square",
        "disparity": 0.5,
        "vignette_sigma": 0.5,
        "noise_sigma": 0.0,
        "hot_pixels": 0,
        "r_gain": 1.0,
        "b_gain": 1.0,
        "bayer_pattern": "RGGB",
        "lightness_shift": 0.0,
    },
    "decode": {"interpolation": "wi-guided", "percentile": 0.999, "dark_view_luma_floor": 0.02, "preview": False},
    "recolour": {"schemes": ["prop"], "match": {"seed_stride": 4}, "transfer": {}},
    "denoise": {"sigma": "auto", "patch_size": 8, "angular_window": 5, "num_similar": 8, "search_radius": 16,
                "disparity_range": 2.0, "disparity_step": 0.5, "hard_threshold": 2.7, "stage": "hard"},
    "report": {"samples_per_degree": 23.0, "bins": 25, "patch_size": 7},
}

INTERPOLATION = {"bicubic": Interpolation.BICUBIC, "wi-guided": Interpolation.WI_GUIDED_BICUBIC}
SCENES = {k.value.lower(): k for k in SceneKind} | {"flat": SceneKind.FLAT_GREY, "smooth": SceneKind.SMOOTH_GRADIENT,
                                                    "textured": SceneKind.TEXTURED_DISPARITY,
                                                    "chart": SceneKind.COLOR_CHART}
STAGE_ORDER = ("decode", "recolour", "denoise")


class InputError(Exception):
    pass


class StageError(Exception):
    pass


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file {p} not found")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {p} is not valid JSON: {exc}") from exc
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise InputError(f"unknown config sections: {sorted(unknown)}")
    return _merge(DEFAULTS, user)


def resolve(args) -> dict:
    """Config file values overridden by explicit command-line flags."""
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.workers is not None:
        cfg["workers"] = args.workers
    if getattr(args, "scheme", None):
        cfg["recolour"]["schemes"] = list(args.scheme)
    if getattr(args, "interpolation", None):
        cfg["decode"]["interpolation"] = args.interpolation
    if getattr(args, "sigma", None) is not None:
        cfg["denoise"]["sigma"] = args.sigma
    for key in ("scene", "views", "disparity", "lightness_shift", "noise_sigma"):
        val = getattr(args, key, None)
        if val is not None:
            cfg["simulate"][key] = val
    return cfg


def _rel(path, directory) -> str:
    """Input path relative to the output directory, so relocated runs record identical manifests."""
    return os.path.relpath(Path(path), Path(directory)).replace(os.sep, "/")


def write_run(directory: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    doc = {"command": command, "config": cfg}
    if extra:
        doc.update(extra)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / RUN_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def check_order(meta: dict, stage: str, force: bool) -> None:
    """Require every earlier stage in the light field's history."""
    history = meta.get("history", [])
    need = STAGE_ORDER[:STAGE_ORDER.index(stage)]
    missing = [s for s in need if s not in history]
    if stage in history:
        missing.append(f"{stage} (already applied)")
    if missing:
        msg = f"{stage} expects prior stages {list(need)}; history is {history}"
        if not force:
            raise StageError(msg + " (use --force-order to override)")
        logger.warning("%s; continuing because of --force-order", msg)


# ------------------------------------------------------------------ stages

def cmd_simulate(cfg: dict, out: Path) -> Path:
    s = cfg["simulate"]
    key = str(s["scene"]).lower()
    if key not in SCENES:
        raise InputError(f"unknown scene {s['scene']!r}")
    kind = SCENES[key]
    seed = int(cfg["seed"])
    n = int(s["views"])
    grid, width, height = grid_for(int(s["lens_rows"]), int(s["lens_cols"]), float(s["spacing"]), layout=s["layout"])
    gt = synth_lightfield(kind, n, n, grid.lens_cols, grid.lens_rows, float(s["disparity"]), seed)
    if s["lightness_shift"]:
        gt = shift_lightness(gt, float(s["lightness_shift"]))
    gains = WhiteBalanceFactors(float(s["r_gain"]), float(s["b_gain"]))
    params = SimParams(grid, float(s["vignette_sigma"]), gains, float(s["noise_sigma"]), int(s["hot_pixels"]),
                       s["bayer_pattern"], seed)
    raw = simulate_raw(gt, params, width, height)
    white = synth_white_image(params, width, height)
    meta = {"scene": kind.value, "disparity": float(s["disparity"]), "seed": seed, "views": n,
            "lightness_shift": float(s["lightness_shift"])}
    try:
        save_bundle(out, raw, white, gains, grid, meta, gt)
    except OSError as exc:
        raise InputError(f"cannot write bundle to {out}: {exc}") from exc
    write_run(out, "simulate", cfg)
    logger.info("simulated %s bundle (%dx%d sensor) in %s", kind.value, width, height, out)
    return out


def cmd_decode(cfg: dict, bundle_dir: Path, out: Path) -> Path:
    d = cfg["decode"]
    bundle = load_bundle(bundle_dir)
    if d["interpolation"] not in INTERPOLATION:
        raise InputError(f"unknown interpolation {d['interpolation']!r}")
    n = int(bundle.meta.get("views", cfg["simulate"]["views"]))
    params = DecodeParams(n, n, INTERPOLATION[d["interpolation"]], percentile=float(d["percentile"]),
                          dark_view_luma_floor=float(d["dark_view_luma_floor"]))
    lf = decode(bundle.raw, bundle.white, bundle.wb, bundle.grid, params, workers=int(cfg["workers"]))
    lf = lf.with_views(meta=dict(lf.meta, source=bundle.meta))
    save_lightfield(lf, out)
    if d["preview"]:
        prev = out / "preview"
        prev.mkdir(exist_ok=True)
        for u, v in lf.valid_views():
            write_image16(prev / f"view_{u:02d}_{v:02d}.png", srgb_encode(lf.view(u, v)))
    write_run(out, "decode", cfg, {"bundle": _rel(bundle_dir, out)})
    logger.info("decoded %dx%d views of %dx%d pixels into %s", lf.U, lf.V, lf.height, lf.width, out)
    return out


def _match_cfg(cfg):
    m = dict(cfg["recolour"].get("match", {}))
    m.setdefault("seed", int(cfg["seed"]))
    return MatchConfig(**m)


def _transfer_cfg(cfg):
    t = dict(cfg["recolour"].get("transfer", {}))
    for k in ("h_schedule", "control_grid"):
        if k in t:
            t[k] = tuple(t[k])
    return TransferConfig(**t)


def cmd_recolour(cfg: dict, src: Path, out: Path, scheme: str, force: bool = False) -> Path:
    lf = load_lightfield(src)
    check_order(lf.meta, "recolour", force)
    res = recolour_lightfield(lf, scheme, _transfer_cfg(cfg), _match_cfg(cfg), workers=int(cfg["workers"]))
    save_lightfield(res.lightfield, out)
    (out / "plan.txt").write_text(res.plan.dump())
    log = {f"{u},{v}": {"correspondences": res.correspondences[(u, v)], "transform": t.to_dict()}
           for (u, v), t in sorted(res.transforms.items())}
    (out / "transforms.json").write_text(json.dumps(log, indent=1, sort_keys=True) + "\n")
    write_run(out, "recolour", cfg, {"input": _rel(src, out), "scheme": PropagationScheme(scheme).value})
    failed = int(lf.valid.sum() - res.lightfield.valid.sum())
    logger.info("recoloured with scheme %s into %s (%d views marked invalid)", scheme, out, failed)
    return out


def _sigma(value, lf) -> float:
    if value is None or str(value).lower() == "auto":
        sigma = estimate_noise(lf.centre_view())
        logger.info("sigma=auto resolved to %.8g from the centre view", sigma)
        return sigma
    try:
        sigma = float(value)
    except ValueError as exc:
        raise InputError(f"sigma must be 'auto' or a number, got {value!r}") from exc
    if sigma < 0:
        raise InputError("sigma must be non-negative")
    return sigma


def cmd_denoise(cfg: dict, src: Path, out: Path, force: bool = False) -> Path:
    d = dict(cfg["denoise"])
    lf = load_lightfield(src)
    check_order(lf.meta, "denoise", force)
    sigma = _sigma(d.pop("sigma"), lf)
    params = DenoiseParams(sigma=sigma, **d)
    res = denoise_lightfield(lf, params, workers=int(cfg["workers"]))
    save_lightfield(res, out)
    write_run(out, "denoise", cfg, {"input": _rel(src, out), "sigma": sigma})
    logger.info("denoised with sigma %.6g into %s", sigma, out)
    return out


def cmd_report(cfg: dict, inputs: dict, out: Path | None) -> str:
    rc = ReportConfig(**cfg["report"])
    reports = {}
    for label, path in inputs.items():
        reports[label] = lightfield_report(load_lightfield(path), rc, workers=int(cfg["workers"]))
    text = []
    for label, rep in reports.items():
        text.append(f"== {label}\n{rep.to_table()}")
    text.append(comparison_table(reports))
    text = "\n".join(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        rows = ["label,view,scielab,hist_chi2,noise_sigma"]
        for label, rep in reports.items():
            for line in rep.to_csv().splitlines()[1:]:
                rows.append(f"{label},{line}")
        (out / "report.csv").write_text("\n".join(rows) + "\n")
        (out / "report.json").write_text(
            json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=1, sort_keys=True) + "\n")
        write_run(out, "report", cfg, {"inputs": {k: _rel(v, out) for k, v in inputs.items()}})
    return text


def cmd_pipeline(cfg: dict, out: Path) -> str:
    out.mkdir(parents=True, exist_ok=True)
    bundle = cmd_simulate(cfg, out / "bundle")
    decoded = cmd_decode(cfg, bundle, out / "decoded")
    inputs = {"decoded": decoded}
    for scheme in cfg["recolour"]["schemes"]:
        name = PropagationScheme(scheme).value
        rec = cmd_recolour(cfg, decoded, out / "recoloured" / name, scheme)
        den = cmd_denoise(cfg, rec, out / "denoised" / name)
        inputs[f"{name}"] = rec
        inputs[f"{name}+denoise"] = den
    text = cmd_report(cfg, inputs, out / "report")
    write_run(out, "pipeline", cfg)
    return text


# ------------------------------------------------------------------ parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--workers", type=int, help="worker threads per stage")
    common.add_argument("--force-order", action="store_true", help="allow stages out of pipeline order")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="lfpipe", description="Plenoptic light field processing pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="render a synthetic RAW bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--scene", choices=sorted(SCENES))
    s.add_argument("--views", type=int)
    s.add_argument("--disparity", type=float)
    s.add_argument("--lightness-shift", dest="lightness_shift", type=float)
    s.add_argument("--noise-sigma", dest="noise_sigma", type=float)

    d = sub.add_parser("decode", parents=[common], help="decode a RAW bundle into views")
    d.add_argument("--bundle", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--interpolation", choices=sorted(INTERPOLATION))

    r = sub.add_parser("recolour", parents=[common], help="propagate the centre view's colours")
    r.add_argument("--input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--scheme", action="append", choices=[x.value for x in PropagationScheme])

    n = sub.add_parser("denoise", parents=[common], help="denoise a light field")
    n.add_argument("--input", required=True)
    n.add_argument("--out", required=True)
    n.add_argument("--sigma", help="noise standard deviation or 'auto'")

    m = sub.add_parser("report", parents=[common], help="colour and noise metrics")
    m.add_argument("--input", action="append", required=True, help="light field directory, optionally LABEL=DIR")
    m.add_argument("--out")

    a = sub.add_parser("pipeline", parents=[common], help="simulate, decode, recolour, denoise and report")
    a.add_argument("--out", required=True)
    a.add_argument("--scheme", action="append", choices=[x.value for x in PropagationScheme])
    a.add_argument("--interpolation", choices=sorted(INTERPOLATION))
    a.add_argument("--sigma")
    return p


def _labelled(items) -> dict:
    out = {}
    for item in items:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).name, item
        out[label] = Path(path)
    return out


def run(args) -> int:
    cfg = resolve(args)
    cmd = args.command
    out = Path(args.out) if getattr(args, "out", None) else None
    if cmd == "simulate":
        cmd_simulate(cfg, out)
    elif cmd == "decode":
        cmd_decode(cfg, Path(args.bundle), out)
    elif cmd == "recolour":
        schemes = cfg["recolour"]["schemes"]
        if len(schemes) == 1:
            cmd_recolour(cfg, Path(args.input), out, schemes[0], args.force_order)
        else:
            for sch in schemes:
                cmd_recolour(cfg, Path(args.input), out / PropagationScheme(sch).value, sch, args.force_order)
    elif cmd == "denoise":
        cmd_denoise(cfg, Path(args.input), out, args.force_order)
    elif cmd == "report":
        print(cmd_report(cfg, _labelled(args.input), out), end="")
    elif cmd == "pipeline":
        print(cmd_pipeline(cfg, out), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (InputError, MissingInput, LightFieldIOError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except (StageError, DecodeError, PlanError, TransferError, CorrespondenceError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
