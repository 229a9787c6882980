"""Manifests, ground truth, sample mining and the synthetic scene generator."""

from .groundtruth import (
    GroundTruthConfig,
    angle_difference,
    fov_overlap_distance,
    fov_overlaps,
    ground_truth_matrix,
    ground_truth_sets,
)
from .images import ImageStore, read_labelmap, read_rgb, write_labelmap
from .mining import (
    DescriptorProvider,
    SamplePair,
    ShortNegativesWarning,
    as_provider,
    mine_positives,
    sample_negatives,
)
from .records import MANIFEST_FIELDS, PlaceRecord, Pose, load_manifest, save_manifest, split_records
from .synth import SynthConfig, SynthOutput, load_meta, load_synth, synth_generate

__all__ = [
    "DescriptorProvider",
    "GroundTruthConfig",
    "ImageStore",
    "MANIFEST_FIELDS",
    "PlaceRecord",
    "Pose",
    "SamplePair",
    "ShortNegativesWarning",
    "SynthConfig",
    "SynthOutput",
    "angle_difference",
    "as_provider",
    "fov_overlap_distance",
    "fov_overlaps",
    "ground_truth_matrix",
    "ground_truth_sets",
    "load_manifest",
    "load_meta",
    "load_synth",
    "mine_positives",
    "read_labelmap",
    "read_rgb",
    "sample_negatives",
    "save_manifest",
    "split_records",
    "synth_generate",
    "write_labelmap",
]
