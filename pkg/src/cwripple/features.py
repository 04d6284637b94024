"""DC level, ripple metrics and shape statistics of one steady-state cycle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circuit import CycleWaveform

__all__ = ["RippleFeatures", "TooFewSamplesError", "extract_features", "MIN_SAMPLES"]

MIN_SAMPLES = 16


class TooFewSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class RippleFeatures:
    """Moments are population (divide-by-n) moments of the DC-removed cycle.

    ``kurtosis`` is Pearson (non-excess) kurtosis, 1.5 for a sinusoid.
    ``crest_factor`` is ``max|v - mean| / v_rms``, i.e. taken on the ripple
    component rather than the raw waveform.
    """

    v_dc: float
    v_pp: float
    v_rms: float
    std_dev: float
    skewness: float
    kurtosis: float
    crest_factor: float
    degenerate: bool = False


def extract_features(waveform: CycleWaveform | np.ndarray) -> RippleFeatures:
    samples = waveform.samples if isinstance(waveform, CycleWaveform) else waveform
    v = np.asarray(samples, dtype=float)
    if v.ndim != 1 or v.size < MIN_SAMPLES:
        raise TooFewSamplesError(f"need at least {MIN_SAMPLES} samples, got {v.size}")
    v_dc = float(np.mean(v))
    r = v - v_dc
    v_pp = float(np.max(v) - np.min(v))
    m2 = float(np.mean(r * r))
    v_rms = float(np.sqrt(m2))
    if v_rms < 1e-12 * max(1.0, abs(v_dc)):
        return RippleFeatures(v_dc, v_pp, v_rms, v_rms, 0.0, 0.0, 0.0, degenerate=True)
    # normalise before raising to high powers to keep the moments well scaled
    z = r / v_rms
    skew = float(np.mean(z ** 3))
    kurt = float(np.mean(z ** 4))
    crest = float(np.max(np.abs(z)))
    return RippleFeatures(v_dc, v_pp, v_rms, v_rms, skew, kurt, crest)
