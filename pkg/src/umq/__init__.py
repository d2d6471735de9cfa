"""Quality-aware multimodal training framework on a self-contained autodiff engine."""

__version__ = "0.1.0"
