"""Portfolio weights from a differentiable robust mean-variance layer trained on its own decisions."""

__version__ = "0.1.0"
