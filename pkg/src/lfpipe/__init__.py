"""Plenoptic light field decoding, colour propagation, denoising and evaluation."""

from .core import ColourSpace, LightField, load_lightfield, rgb_to_lab, lab_to_rgb, save_lightfield
from .decode import (
    DecodeParams,
    Interpolation,
    LensletGrid,
    Layout,
    PlenopticRaw,
    WhiteBalanceFactors,
    WhiteImage,
    decode,
    normalize_white_image,
)
from .correspondence import CorrespondenceSet, MatchConfig, patch_match
from .transfer import TpsTransform, TransferConfig, fit_transfer, recolour_image
from .propagation import PropagationScheme, RecolourPlan, build_plan, recolour_lightfield
from .denoise import DenoiseParams, denoise_lightfield
from .metrics import MetricReport, estimate_noise, hist_chi2, lightfield_report, scielab
from .sim import SceneKind, SimParams, grid_for, simulate_raw, synth_lightfield, synth_white_image

__version__ = "0.1.0"
