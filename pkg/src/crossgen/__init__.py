"""Cross-dataset generalization auditing for binary medical image classifiers."""

__version__ = "0.1.0"

from .bias import BiasDiagnostics, chi_squared, class_histogram  # noqa: E402
from .estimators import CTClassifier  # noqa: E402
from .evaluator import ConfusionMatrix, compute_metrics, cross_dataset_matrix  # noqa: E402
from .gabor import GaborConv2d, gabor_kernel, init_bank  # noqa: E402
from .involvement import MinMaxEnsemble, minmax_ensemble, monotonicity_check, score_strata  # noqa: E402
from .preprocess import ImagePreprocessor, PreprocessSpec, clahe, hist_equalize  # noqa: E402
from .registry import SplitSpec, Stratum, balanced_schedule, load_manifest, make_splits  # noqa: E402
from .trainer import ModelArtifact, TrainConfig, build_model, fit  # noqa: E402

__all__ = [
    "BiasDiagnostics", "CTClassifier", "ConfusionMatrix", "GaborConv2d", "ImagePreprocessor",
    "MinMaxEnsemble", "ModelArtifact", "PreprocessSpec", "SplitSpec", "Stratum", "TrainConfig",
    "balanced_schedule", "build_model", "chi_squared", "clahe", "class_histogram",
    "compute_metrics", "cross_dataset_matrix", "fit", "gabor_kernel", "hist_equalize",
    "init_bank", "load_manifest", "make_splits", "minmax_ensemble", "monotonicity_check",
    "score_strata",
]
