"""Post-silicon clock-tuning delay-test simulator and optimization library."""

__version__ = "0.1.0"
