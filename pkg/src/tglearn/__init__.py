"""Two-stage learning on textual graphs: a small text encoder produces node
features, and graph models are trained on top of the cached features."""

__version__ = "0.1.0"
