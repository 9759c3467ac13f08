"""Patient body-mesh estimation from keypoint heatmaps, with synthetic
training data, two-branch heatmap fusion and CT isocentering."""

__version__ = "0.1.0"
