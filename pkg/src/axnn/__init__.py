"""axnn: simulator and design-space explorer for approximate-multiplier CNN inference."""

__version__ = "0.1.0"
