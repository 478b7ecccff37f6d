"""Manifests, frame labelling, subject folds, metrics, experiments and synthetic data."""

from .folds import FoldPlan, make_subject_folds, subject_split
from .labeling import FromFramePolicy, PrefixPolicy, label_manifest_samples, label_sequence_frames
from .manifest import (
    DEFAULT_CLASSES, Manifest, ManifestError, SampleRecord, load_manifest, save_manifest,
)
from .metrics import ConfusionMatrix, evaluate
from .synth import SynthSpec, synth_dataset, template_landmarks
from .experiment import (
    EXPERIMENT_MATRIX, ExperimentConfig, ExperimentResult, FaceData, audit_provenance, cross_evaluate,
    fine_tune, load_face_data, run_experiment, run_matrix,
)
