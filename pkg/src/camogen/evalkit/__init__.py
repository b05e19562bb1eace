from .distances import (RandomConvFeatures, default_extractor, feature_distance, fid_from_features,
                        frechet_distance, kid_from_features, kid_lower_bound, kid_subsets)
from .metrics import e_measure, mae, mean_metrics, s_measure, segmentation_metrics, weighted_f
from .probe import ProbeConfig, TinySegmenter, as_pairs, downstream_probe, train_segmenter
from .report import MetricReport

__all__ = [
    "RandomConvFeatures", "default_extractor", "feature_distance", "fid_from_features",
    "frechet_distance", "kid_from_features", "kid_lower_bound", "kid_subsets", "e_measure", "mae",
    "mean_metrics", "s_measure", "segmentation_metrics", "weighted_f", "ProbeConfig",
    "TinySegmenter", "as_pairs", "downstream_probe", "train_segmenter", "MetricReport",
]
