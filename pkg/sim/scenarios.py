"""
Bench Hedge - Parameter Presets

Named model parameter sets used by the tests, the acceptance script and the
example configs. Presets are read from data/presets.json; the in-code table
below is the fallback when the file is missing or unreadable.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Union

from sim.models import GammaDynamics, MmmRandomScalingParams, StylizedMmmParams

logger = logging.getLogger(__name__)

PRESETS_PATH = Path(__file__).parent.parent / 'data' / 'presets.json'

_FALLBACK_PRESETS = {
    'stylized_base': {'variant': 'stylized', 'alpha0': 0.05, 'beta': 0.05, 'r': 0.0, 'z0': 1.0},
    'stylized_rate': {'variant': 'stylized', 'alpha0': 0.05, 'beta': 0.05, 'r': 0.03, 'z0': 1.0},
    'random_scaling_cir': {
        'variant': 'random_scaling', 'bessel_dim': 4.0, 'z0': 1.0, 'gamma0': 0.05,
        'gamma': {'kind': 'cir', 'kappa': 0.5, 'theta': 0.05, 'sigma': 0.1}, 'rho': 0.0, 'r': 0.0,
    },
    'random_scaling_constant': {
        'variant': 'random_scaling', 'bessel_dim': 4.0, 'z0': 1.0, 'gamma0': 0.05,
        'gamma': {'kind': 'constant'}, 'rho': 0.0, 'r': 0.0,
    },
}

ModelParams = Union[StylizedMmmParams, MmmRandomScalingParams]


def _load_presets() -> Dict[str, dict]:
    try:
        with open(PRESETS_PATH, 'r') as f:
            return json.load(f)['presets']
    except (FileNotFoundError, json.JSONDecodeError, KeyError):
        logger.warning("presets file %s unavailable, using built-in presets", PRESETS_PATH)
        return dict(_FALLBACK_PRESETS)


def available_presets() -> list:
    return sorted(_load_presets())


def build_params(spec: dict) -> ModelParams:
    """
    Model parameters from a plain dict with a 'variant' key.

    Optional 'assets' carries asset_appreciation, asset_vols and s0_j.

    Raises:
        ValueError: On an unknown variant or invalid parameters
    """
    spec = dict(spec)
    variant = spec.pop('variant', None)
    assets = spec.pop('assets', {}) or {}
    asset_kwargs = {k: (tuple(map(tuple, v)) if k == 'asset_vols' else tuple(v)) for k, v in assets.items()}
    if variant == 'stylized':
        return StylizedMmmParams(**spec, **asset_kwargs)
    if variant == 'random_scaling':
        dynamics = GammaDynamics(**spec.pop('gamma', {}))
        return MmmRandomScalingParams(gamma_drift=dynamics.drift, gamma_diffusion=dynamics.diffusion,
                                      **spec, **asset_kwargs)
    raise ValueError(f"unknown model variant '{variant}' (expected 'stylized' or 'random_scaling')")


def preset_spec(name: str) -> dict:
    """Raw parameter dict of a named preset (a copy)."""
    presets = _load_presets()
    if name not in presets:
        raise ValueError(f"unknown preset '{name}' (available: {sorted(presets)})")
    return dict(presets[name])


def load_preset(name: str) -> ModelParams:
    """
    Parameters of a named preset.

    Example:
        >>> load_preset('stylized_base').alpha0
        0.05
    """
    return build_params(preset_spec(name))
