"""Few-shot node classification with adaptive low/high-pass spectral experts
and query-guided prototype calibration."""

__version__ = "0.1.0"
