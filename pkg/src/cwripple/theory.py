"""Classical closed-form formulas for the half-wave Cockcroft-Walton multiplier.

Everything is in SI base units. These functions are the interpretable
baseline that the residual model corrects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "TheoryInputs",
    "DegenerateInputError",
    "ideal_output_voltage",
    "theoretical_ripple_pp",
    "ripple_rms_from_pp",
    "ripple_factor",
    "load_current",
]


class DegenerateInputError(ValueError):
    """Input is valid in type but numerically degenerate (e.g. zero DC level)."""


@dataclass(frozen=True)
class TheoryInputs:
    n_stages: int
    vin_peak: float
    freq: float
    cap: float
    i_load: float

    def __post_init__(self):
        if int(self.n_stages) != self.n_stages or self.n_stages < 1:
            raise ValueError(f"n_stages must be a positive integer, got {self.n_stages!r}")
        if not self.vin_peak > 0:
            raise ValueError(f"vin_peak must be > 0, got {self.vin_peak!r}")
        if not self.freq > 0:
            raise ValueError(f"freq must be > 0, got {self.freq!r}")
        if not self.cap > 0:
            raise ValueError(f"cap must be > 0, got {self.cap!r}")
        if not self.i_load >= 0:
            raise ValueError(f"i_load must be >= 0, got {self.i_load!r}")


def ideal_output_voltage(n_stages: int, vin_peak: float) -> float:
    """No-load output ``2 * N * V_in``."""
    if int(n_stages) != n_stages or n_stages < 1:
        raise ValueError(f"n_stages must be a positive integer, got {n_stages!r}")
    if not vin_peak > 0:
        raise ValueError(f"vin_peak must be > 0, got {vin_peak!r}")
    return 2.0 * n_stages * vin_peak


def theoretical_ripple_pp(inputs: TheoryInputs) -> float:
    """Peak-to-peak ripple ``I_L / (f C) * N (N + 1) / 2``."""
    fc = inputs.freq * inputs.cap
    if fc == 0:
        raise ValueError("f * C must be nonzero")
    n = inputs.n_stages
    return inputs.i_load / fc * (n * (n + 1) / 2.0)


def ripple_rms_from_pp(v_pp: float) -> float:
    """RMS of a sawtooth with peak-to-peak ``v_pp``: ``v_pp / (2 sqrt 3)``.

    Used to turn the peak-to-peak estimate into a ripple-factor estimate.
    """
    return v_pp / (2.0 * math.sqrt(3.0))


def ripple_factor(v_rms_ripple: float, v_dc: float) -> float:
    """``V_rms / |V_dc|``; raises on ``|V_dc| < 1e-9`` V."""
    if not v_rms_ripple >= 0:
        raise ValueError(f"v_rms_ripple must be >= 0, got {v_rms_ripple!r}")
    if not abs(v_dc) >= 1e-9:
        raise DegenerateInputError(f"|v_dc| = {abs(v_dc)!r} V is too small for a ripple factor")
    return v_rms_ripple / abs(v_dc)


def load_current(v_dc: float, r_load: float) -> float:
    if not r_load > 0:
        raise ValueError(f"r_load must be > 0, got {r_load!r}")
    return v_dc / r_load
