"""Transformer keypoint estimator with cross-resolution feature aggregation."""

from ._aggpose import (
    CheckpointError,
    DatasetError,
    ImageIoError,
    Model,
    ShapeError,
    decode_heatmaps,
    encode_heatmaps,
    evaluate,
    generate_synthetic,
    oks,
)

__all__ = [
    "CheckpointError",
    "DatasetError",
    "ImageIoError",
    "Model",
    "ShapeError",
    "decode_heatmaps",
    "encode_heatmaps",
    "evaluate",
    "generate_synthetic",
    "oks",
]
