"""Python bindings for the cellflow core."""

from ._core import (
    CellflowError,
    Classifier,
    auroc,
    co2_kg,
    detection_score,
    encode_targets,
    extract_embeddings,
    if_overlap_fraction,
    lanczos_resample,
    macro_f1,
    match_detections,
    plan_tiles,
    postprocess,
    pq,
    read_tensor,
    resample_labels,
    reshape_tokens,
    segment_tiled,
    tensor_header_size,
    train,
    write_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "CellflowError",
    "Classifier",
    "auroc",
    "co2_kg",
    "detection_score",
    "encode_targets",
    "extract_embeddings",
    "if_overlap_fraction",
    "lanczos_resample",
    "macro_f1",
    "match_detections",
    "plan_tiles",
    "postprocess",
    "pq",
    "read_tensor",
    "resample_labels",
    "reshape_tokens",
    "segment_tiled",
    "tensor_header_size",
    "train",
    "write_tensor",
]
