"""Feature-map exporter: pretrained backbones to ACTF v1 files."""

from .export import DEFAULT_LAYERS, ExportConfig, FeatureTap, export, preprocess

__version__ = "0.1.0"
