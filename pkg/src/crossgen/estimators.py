"""scikit-learn style wrapper around the training loop."""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import GroupShuffleSplit
from sklearn.utils.validation import check_is_fitted

from .exceptions import ContractError
from .preprocess import IMAGENET_MEAN, IMAGENET_STD, PreprocessSpec
from .registry import SampleRecord
from .trainer import ModelArtifact, TrainConfig, build_model, fit


@dataclass(frozen=True)
class ArrayRecord:
    """An in-memory image standing in for a SampleRecord."""

    image: np.ndarray
    label: int
    patient_id: str

    def load(self):
        return self.image


def as_records(X, y=None):
    """Coerce images/paths (with labels) or SampleRecords into record objects."""
    X = list(X)
    if X and all(isinstance(x, SampleRecord) for x in X):
        return X
    if y is None:
        raise ContractError("labels are required unless X holds SampleRecords")
    y = np.asarray(y)
    if len(y) != len(X):
        raise ContractError(f"X has {len(X)} items but y has {len(y)}")
    out = []
    for i, (x, lab) in enumerate(zip(X, y)):
        if isinstance(x, np.ndarray):
            out.append(ArrayRecord(x, int(lab), f"item-{i}"))
        else:
            out.append(SampleRecord(x, int(lab), f"item-{i}"))
    return out


class CTClassifier(ClassifierMixin, BaseEstimator):
    """Binary image classifier with an optional learnable Gabor stem.

    ``fit`` accepts SampleRecords, image paths or decoded uint8 arrays. Without
    explicit validation data, ``val_fraction`` of the training patients are held
    out (grouped by patient id) for early stopping.
    """

    def __init__(self, backbone="densenet121", gabor=False, pretrained=True,
                 histogram_mode="none", resolution=224, clahe_clip_limit=2.0, clahe_tiles=8,
                 mean=IMAGENET_MEAN, std=IMAGENET_STD, learning_rate=1e-5, patience=3,
                 max_epochs=100, batch_size=16, augment=True, val_fraction=0.2,
                 random_state=0, device="cpu", dataset_name="unnamed"):
        self.backbone = backbone
        self.gabor = gabor
        self.pretrained = pretrained
        self.histogram_mode = histogram_mode
        self.resolution = resolution
        self.clahe_clip_limit = clahe_clip_limit
        self.clahe_tiles = clahe_tiles
        self.mean = mean
        self.std = std
        self.learning_rate = learning_rate
        self.patience = patience
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.augment = augment
        self.val_fraction = val_fraction
        self.random_state = random_state
        self.device = device
        self.dataset_name = dataset_name

    def _preprocess_spec(self):
        return PreprocessSpec(self.histogram_mode, self.resolution, self.clahe_clip_limit,
                              self.clahe_tiles, self.mean, self.std)

    def _train_config(self):
        return TrainConfig(learning_rate=self.learning_rate, patience=self.patience,
                           max_epochs=self.max_epochs, batch_size=self.batch_size,
                           seed=self.random_state, backbone=self.backbone,
                           pretrained=self.pretrained, augment=self.augment, device=self.device)

    def fit(self, X, y=None, X_val=None, y_val=None):
        records = as_records(X, y)
        if X_val is None:
            groups = [r.patient_id for r in records]
            split = GroupShuffleSplit(n_splits=1, test_size=self.val_fraction,
                                      random_state=self.random_state)
            tr, va = next(split.split(records, groups=groups))
            train, val = [records[i] for i in tr], [records[i] for i in va]
        else:
            train, val = records, as_records(X_val, y_val)
        cfg = self._train_config()
        model = build_model(self.backbone, self.gabor, self.random_state, self.pretrained)
        self.artifact_ = fit(model, train, val, cfg, self._preprocess_spec(),
                             dataset=self.dataset_name, gabor=self.gabor)
        self._set_fitted()
        return self

    def _set_fitted(self):
        self.classes_ = np.array([0, 1])
        self.history_ = self.artifact_.history
        self.best_epoch_ = self.artifact_.provenance["best_epoch"]
        return self

    @classmethod
    def from_artifact(cls, artifact):
        """A fitted estimator wrapping an existing (e.g. loaded) artifact."""
        prov = artifact.provenance
        pp = artifact.preprocess
        est = cls(backbone=prov["backbone"], gabor=prov["gabor"], pretrained=False,
                  histogram_mode=pp.histogram_mode, resolution=pp.resolution,
                  clahe_clip_limit=pp.clahe_clip_limit, clahe_tiles=pp.clahe_tiles,
                  mean=pp.mean, std=pp.std, random_state=prov["seed"],
                  dataset_name=prov["dataset"])
        est.artifact_ = artifact
        return est._set_fitted()

    @property
    def name(self):
        check_is_fitted(self, "artifact_")
        return self.artifact_.name

    @property
    def provenance(self):
        check_is_fitted(self, "artifact_")
        return self.artifact_.provenance

    def predict_proba(self, X):
        check_is_fitted(self, "artifact_")
        return self.artifact_.predict_proba(list(X))

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def save(self, path):
        check_is_fitted(self, "artifact_")
        return self.artifact_.save(path)

    @classmethod
    def load(cls, path):
        return cls.from_artifact(ModelArtifact.load(path))
