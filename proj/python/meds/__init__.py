"""Noise-robust anomaly detection on patch-feature tensors."""

from ._meds import (
    MedsError,
    SynthSpec,
    PipelineConfig,
    FeatureDataset,
    Reconstructor,
    generate_synthetic,
    inject_contamination,
    read_feature_file,
    write_feature_file,
    prepare_data,
    memory_scores,
    run_pipeline,
    infer,
    auroc,
    average_precision,
    aupro,
    inspection_depth,
    robust_max,
    class_threshold,
    schedule,
    spatial_proportion,
    expected_nn_distance,
    expected_nn_distance_mc,
    verify_theorem,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
