import numpy as np
import pytest

from lfpipe.core import RGB_TO_XYZ
from lfpipe.decode import DecodeError, DecodeParams, PlenopticRaw, WhiteBalanceFactors, cfa_channels, decode
from lfpipe.metrics import estimate_noise
from lfpipe.sim import (
    COLOR_CHART,
    HOT_PIXEL_VALUE,
    WI_PEAK,
    SceneKind,
    SimParams,
    grid_for,
    simulate_raw,
    synth_lightfield,
    synth_white_image,
)


def test_flat_grey_lightfield():
    lf = synth_lightfield(SceneKind.FLAT_GREY, 3, 3, 8, 8)
    np.testing.assert_array_equal(lf.views, 0.5)


def test_textured_views_are_translations():
    d = 1.0
    lf = synth_lightfield(SceneKind.TEXTURED_DISPARITY, 5, 5, 40, 40, disparity=d, seed=2)
    c = lf.centre_view()
    for u, v in [(0, 0), (1, 3), (4, 2)]:
        dx, dy = int(d * (v - 2)), int(d * (u - 2))
        view = lf.views[u, v]
        # view(x, y) = centre(x - dx, y - dy) away from the borders
        np.testing.assert_allclose(view[6 + dy:-6 + dy, 6 + dx:-6 + dx], c[6:-6, 6:-6], atol=1e-12)


def test_chart_patch_palette():
    lf = synth_lightfield(SceneKind.COLOR_CHART, 3, 3, 60, 40)
    np.testing.assert_allclose(lf.centre_view()[0, 0], COLOR_CHART[0, 0])
    np.testing.assert_allclose(lf.centre_view()[-1, -1], COLOR_CHART[3, 5])


def test_scenes_deterministic():
    a = synth_lightfield(SceneKind.TEXTURED_DISPARITY, 3, 3, 20, 20, 0.5, seed=9)
    b = synth_lightfield(SceneKind.TEXTURED_DISPARITY, 3, 3, 20, 20, 0.5, seed=9)
    np.testing.assert_array_equal(a.views, b.views)


def test_disparity_limit():
    with pytest.raises(ValueError):
        synth_lightfield(SceneKind.SMOOTH_GRADIENT, 9, 9, 32, 32, disparity=1.0)


def test_white_image_peak_per_site():
    grid, w, h = grid_for(4, 4, 11.0)
    wb = WhiteBalanceFactors(2.0, 1.5)
    wi = synth_white_image(SimParams(grid, 0.5, wb), w, h).sensor
    ch = cfa_channels("RGGB", (h, w))
    gain = np.array([2.0, 1.0, 1.5])
    for x, y in grid.centers().reshape(-1, 2).astype(int):
        assert wi[y, x] == pytest.approx(WI_PEAK / gain[ch[y, x]], abs=1e-6)


def test_wide_vignette_is_uniform_per_site():
    grid, w, h = grid_for(3, 3, 11.0)
    wi = synth_white_image(SimParams(grid, 1e3), w, h).sensor
    np.testing.assert_allclose(wi, WI_PEAK, rtol=1e-5)


def test_hot_pixels():
    grid, w, h = grid_for(4, 4)
    wi = synth_white_image(SimParams(grid, hot_pixel_count=5), w, h).sensor
    assert (wi == HOT_PIXEL_VALUE).sum() == 5


def test_white_scene_reproduces_white_image():
    grid, w, h = grid_for(6, 6)
    p = SimParams(grid, 0.5)
    lf = synth_lightfield(SceneKind.FLAT_GREY, 5, 5, 6, 6)
    lf = lf.with_views(views=np.ones_like(lf.views))
    raw = simulate_raw(lf, p, w, h).sensor
    np.testing.assert_allclose(raw, synth_white_image(p, w, h).sensor / WI_PEAK, atol=1e-12)


def test_simulated_white_decodes_flat():
    grid, w, h = grid_for(8, 8)
    p = SimParams(grid, 0.5)
    wi = synth_white_image(p, w, h)
    lf = decode(PlenopticRaw(wi.sensor), wi, WhiteBalanceFactors(), grid, DecodeParams(5, 5))
    np.testing.assert_allclose(lf.views[lf.valid], lf.views[2, 2].mean(), atol=1e-9)


def test_simulate_needs_angular_extent():
    grid, w, h = grid_for(4, 4)
    lf = synth_lightfield(SceneKind.FLAT_GREY, 1, 1, 4, 4)
    with pytest.raises(DecodeError):
        simulate_raw(lf, SimParams(grid), w, h)


def test_noise_is_seeded():
    grid, w, h = grid_for(4, 4)
    lf = synth_lightfield(SceneKind.FLAT_GREY, 3, 3, 4, 4)
    a = simulate_raw(lf, SimParams(grid, noise_sigma=0.02, seed=4), w, h).sensor
    b = simulate_raw(lf, SimParams(grid, noise_sigma=0.02, seed=4), w, h).sensor
    c = simulate_raw(lf, SimParams(grid, noise_sigma=0.02, seed=5), w, h).sensor
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_noise_propagates_through_decoding():
    sigma, lenses = 0.02, 48
    grid, w, h = grid_for(lenses, lenses)
    lf = synth_lightfield(SceneKind.FLAT_GREY, 5, 5, lenses, lenses)
    clean = SimParams(grid, 0.5)
    wi = synth_white_image(clean, w, h)
    raw_clean = simulate_raw(lf, clean, w, h).sensor
    dp = DecodeParams(5, 5)
    base = decode(PlenopticRaw(raw_clean), wi, WhiteBalanceFactors(), grid, dp).centre_view()

    # push independent noise draws through the decoder, which is linear away from the clip limits
    lum = RGB_TO_XYZ[1] / np.linalg.norm(RGB_TO_XYZ[1])
    rng = np.random.default_rng(11)
    diffs = []
    for _ in range(4):
        raw = PlenopticRaw(np.clip(raw_clean + rng.normal(0, sigma, raw_clean.shape), 0, 1))
        diffs.append((decode(raw, wi, WhiteBalanceFactors(), grid, dp).centre_view() - base) @ lum)
    propagated = np.std(diffs)

    noisy = simulate_raw(lf, SimParams(grid, 0.5, noise_sigma=sigma, seed=1), w, h)
    est = estimate_noise(decode(noisy, wi, WhiteBalanceFactors(), grid, dp).centre_view())
    assert est == pytest.approx(propagated, rel=0.3)
