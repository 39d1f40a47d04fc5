"""Physics-guided degradation-adaptive experts for all-in-one image restoration."""

__version__ = "0.1.0"

CLASS_ORDER = ("haze", "noise", "lowlight", "blur")
