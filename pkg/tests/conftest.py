import numpy as np
import pytest

from lfpipe.core import rgb_to_lab
from lfpipe.decode import DecodeParams, Interpolation, WhiteBalanceFactors, decode
from lfpipe.sim import SceneKind, SimParams, grid_for, shift_lightness, simulate_raw, synth_lightfield, synth_white_image


def psnr(a, b, peak=1.0):
    mse = np.mean((np.asarray(a) - np.asarray(b)) ** 2)
    return np.inf if mse == 0 else 10 * np.log10(peak**2 / mse)


def roundtrip(kind, views=9, lenses=32, spacing=11.0, vignette_sigma=0.5, gains=(1.0, 1.0), decode_gains=None,
              interpolation=Interpolation.WI_GUIDED_BICUBIC, noise_sigma=0.0, disparity=0.0, seed=0):
    """Simulate a RAW capture of a procedural light field and decode it."""
    grid, w, h = grid_for(lenses, lenses, spacing)
    gt = synth_lightfield(kind, views, views, lenses, lenses, disparity=disparity, seed=seed)
    wb = WhiteBalanceFactors(*gains)
    params = SimParams(grid, vignette_sigma, wb, noise_sigma=noise_sigma, seed=seed)
    raw = simulate_raw(gt, params, w, h)
    wi = synth_white_image(params, w, h)
    dwb = wb if decode_gains is None else WhiteBalanceFactors(*decode_gains)
    lf = decode(raw, wi, dwb, grid, DecodeParams(views, views, interpolation))
    return gt, lf


@pytest.fixture(scope="session")
def textured_lf():
    return synth_lightfield(SceneKind.TEXTURED_DISPARITY, 5, 5, 64, 64, disparity=1.0, seed=3)


@pytest.fixture(scope="session")
def shifted_lf(textured_lf):
    """Textured light field whose non-centre views are 10 L* units brighter."""
    return shift_lightness(textured_lf, 10.0)


def lab_views(lf):
    return np.stack([[rgb_to_lab(lf.views[u, v], lf.white_point) for v in range(lf.V)] for u in range(lf.U)])


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
