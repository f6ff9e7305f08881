"""Private encoders per data source, a shared classifier and multi-kernel MMD
alignment, plus the preprocessing pipeline, baselines and a domain probe."""

__version__ = "0.1.0"
