"""Key-routed low-rank markers for watermarking a frozen image generator."""

from .keycodec import RoutingPath, WatermarkKey, decode_key, encode_routing, sample_key
from .generator import BackboneConfig, MarkerConfig, build_backbone, build_bank
from .extractor import ExtractorConfig, build_extractor, extract_key
from .system import WatermarkSystem, build_system, load_system, save_system
from .verification import DetectionReport, KeyDatabase, detect, fpr, threshold_for_fpr

__all__ = [
    "RoutingPath", "WatermarkKey", "decode_key", "encode_routing", "sample_key",
    "BackboneConfig", "MarkerConfig", "build_backbone", "build_bank",
    "ExtractorConfig", "build_extractor", "extract_key",
    "WatermarkSystem", "build_system", "load_system", "save_system",
    "DetectionReport", "KeyDatabase", "detect", "fpr", "threshold_for_fpr",
]
