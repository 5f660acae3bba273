"""Optimal pattern-function estimation for pulsed balanced detection."""

__version__ = "0.1.0"

from .waveform import PulseWindow, SampledWaveform, Spectrum  # noqa: E402,F401
