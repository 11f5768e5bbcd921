"""Classifier construction, augmentation and the early-stopped fine-tuning loop."""

import copy
import io
import json
import logging
import math
import zipfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import MissingWeightsError, ParameterError, TrainingAborted
from .gabor import GaborConv2d, replace_stem
from .preprocess import PreprocessSpec, prepare_gray, to_tensor
from .registry import SampleRecord, balanced_schedule

logger = logging.getLogger(__name__)

BACKBONES = ("densenet121", "tiny_cnn")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 3
    max_epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    backbone: str = "densenet121"
    pretrained: bool = True
    augment: bool = True
    epoch_len: int | None = None
    device: str = "cpu"
    # None: on for tiny_cnn, off for densenet121
    recalibrate_bn: bool | None = None

    @property
    def precise_bn(self):
        if self.recalibrate_bn is None:
            return self.backbone == "tiny_cnn"
        return self.recalibrate_bn

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ParameterError("patience, max_epochs and batch_size must be >= 1")
        if self.backbone not in BACKBONES:
            raise ParameterError(f"backbone must be one of {BACKBONES}")
        object.__setattr__(self, "betas", tuple(self.betas))

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


class EarlyStopping:
    """Patience counter over validation losses; ties do not count as improvement."""

    def __init__(self, patience=3):
        if patience < 1:
            raise ParameterError("patience must be >= 1")
        self.patience = patience
        self.best_val_loss = math.inf
        self.best_epoch = None
        self.epochs_since_improvement = 0
        self.epoch = 0

    def step(self, val_loss):
        """Record one epoch's loss; returns True if it is a new best."""
        self.epoch += 1
        if val_loss < self.best_val_loss:
            self.best_val_loss = float(val_loss)
            self.best_epoch = self.epoch
            self.epochs_since_improvement = 0
            return True
        self.epochs_since_improvement += 1
        return False

    @property
    def should_stop(self):
        return self.epochs_since_improvement >= self.patience


def run_early_stopping(losses, patience, max_epochs=None):
    """Feed ``losses`` until stop or exhaustion; returns (stop_epoch, best_epoch)."""
    es = EarlyStopping(patience)
    limit = len(losses) if max_epochs is None else min(max_epochs, len(losses))
    for loss in losses[:limit]:
        es.step(loss)
        if es.should_stop:
            break
    return es.epoch, es.best_epoch


class TinyCNN(nn.Module):
    """Four conv blocks, global average pooling and a 2-logit head.

    The 7x7/2 stem mirrors DenseNet-121's so the Gabor bank swaps in unchanged.
    """

    def __init__(self, num_classes=2, width=16):
        super().__init__()
        w = width
        self.features = nn.Sequential(OrderedDict([
            ("conv0", nn.Conv2d(3, w, 7, stride=2, padding=3, bias=False)),
            ("norm0", nn.BatchNorm2d(w)),
            ("relu0", nn.ReLU(inplace=True)),
            ("conv1", nn.Conv2d(w, 2 * w, 3, padding=1, bias=False)),
            ("norm1", nn.BatchNorm2d(2 * w)),
            ("relu1", nn.ReLU(inplace=True)),
            ("pool1", nn.MaxPool2d(2)),
            ("conv2", nn.Conv2d(2 * w, 4 * w, 3, padding=1, bias=False)),
            ("norm2", nn.BatchNorm2d(4 * w)),
            ("relu2", nn.ReLU(inplace=True)),
            ("pool2", nn.MaxPool2d(2)),
            ("conv3", nn.Conv2d(4 * w, 4 * w, 3, padding=1, bias=False)),
            ("norm3", nn.BatchNorm2d(4 * w)),
            ("relu3", nn.ReLU(inplace=True)),
        ]))
        self.classifier = nn.Linear(4 * w, num_classes)

    def forward(self, x):
        x = self.features(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.classifier(x)


def _densenet121(pretrained):
    from torchvision.models import DenseNet121_Weights, densenet121

    if not pretrained:
        return densenet121(weights=None)
    try:
        return densenet121(weights=DenseNet121_Weights.IMAGENET1K_V1)
    except (OSError, RuntimeError) as exc:
        raise MissingWeightsError(
            "ImageNet DenseNet-121 weights are unavailable "
            f"({exc}). Download densenet121-a639ec97.pth into "
            f"{torch.hub.get_dir()}/checkpoints, or build with pretrained=False."
        ) from exc


def build_model(backbone="densenet121", gabor=False, seed=0, pretrained=True):
    """Binary classifier; with ``gabor`` the stem convolution becomes a learnable Gabor bank."""
    if backbone not in BACKBONES:
        raise ParameterError(f"backbone must be one of {BACKBONES}")
    torch.manual_seed(seed)
    if backbone == "densenet121":
        model = _densenet121(pretrained)
        model.classifier = nn.Linear(model.classifier.in_features, 2)
    else:
        model = TinyCNN()
    if gabor:
        model.features.conv0 = replace_stem(model.features.conv0, seed=seed)
    for p in model.parameters():
        p.requires_grad_(True)
    return model


def gabor_stem(model):
    stem = model.features.conv0
    return stem if isinstance(stem, GaborConv2d) else None


def rotate_expand(img, angle):
    """Rotate a uint8 image by ``angle`` degrees on an expanded canvas, scaled back to its size.

    Rotation and rescale are composed into one Lanczos warp; two bilinear
    passes would low-pass the image and shift high-frequency filter statistics
    between training and inference.
    """
    h, w = img.shape[:2]
    centre = ((w - 1) / 2.0, (h - 1) / 2.0)
    rad = math.radians(angle)
    c, s = abs(math.cos(rad)), abs(math.sin(rad))
    expanded_w, expanded_h = h * s + w * c, h * c + w * s
    scale = min(w / expanded_w, h / expanded_h)
    m = cv2.getRotationMatrix2D(centre, angle, scale)
    return cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LANCZOS4,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def hflip(img):
    return np.ascontiguousarray(img[:, ::-1])


def augment(img, rng, max_degrees=1.0, flip_p=0.5):
    """Training-time augmentation: rotation in [-1, 1] degrees with expansion, then a coin-flip mirror."""
    angle = rng.uniform(-max_degrees, max_degrees)
    flip = rng.random() < flip_p
    out = rotate_expand(img, angle)
    return hflip(out) if flip else out


@dataclass
class ModelArtifact:
    """A trained model plus the provenance needed to reproduce its inference path."""

    model: nn.Module
    provenance: dict
    history: list = field(default_factory=list)

    @property
    def preprocess(self):
        return PreprocessSpec.from_dict(self.provenance["preprocess"])

    @property
    def name(self):
        p = self.provenance
        return f"{p['dataset']}__{p['preprocess']['histogram_mode']}__{'gabor' if p['gabor'] else 'plain'}"

    def predict_proba(self, X, batch_size=64):
        """(n, 2) float64 softmax probabilities for records, paths or decoded images.

        Preprocessing is taken from the provenance; no augmentation is applied.
        """
        cache = ImageCache(X, self.preprocess)
        device = next(self.model.parameters()).device
        logits = predict_logits(self.model, cache, batch_size=batch_size, device=device)
        return torch.softmax(logits, dim=1).numpy()

    def save(self, path):
        """Write a zip archive: ``weights.pt``, ``provenance.json`` and, if present, ``gabor.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save(self.model.state_dict(), buf)
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            _write_member(zf, "weights.pt", buf.getvalue())
            _write_member(zf, "provenance.json",
                          json.dumps({"provenance": self.provenance, "history": self.history},
                                     indent=2, sort_keys=True).encode())
            stem = gabor_stem(self.model)
            if stem is not None:
                params = [asdict(p) for p in stem.params()]
                _write_member(zf, "gabor.json", json.dumps(params, indent=2).encode())
        return path

    @classmethod
    def load(cls, path, map_location="cpu"):
        with zipfile.ZipFile(path) as zf:
            doc = json.loads(zf.read("provenance.json"))
            state = torch.load(io.BytesIO(zf.read("weights.pt")), map_location=map_location,
                               weights_only=True)
        prov = doc["provenance"]
        model = build_model(prov["backbone"], prov["gabor"], prov["seed"], pretrained=False)
        model.load_state_dict(state)
        model.eval()
        return cls(model, prov, doc.get("history", []))


def _write_member(zf, name, data):
    # fixed timestamp keeps archives byte-identical across runs
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


class ImageCache:
    """Decoded, preprocessed (pre-normalization) uint8 images, loaded on first access."""

    def __init__(self, items, spec):
        self.items = list(items)
        self.spec = spec
        self._cache = {}

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        if i not in self._cache:
            x = self.items[i]
            if hasattr(x, "load"):
                x = x.load()
            elif not isinstance(x, np.ndarray):
                from ._io import read_image
                x = read_image(x)
            self._cache[i] = prepare_gray(x, self.spec)
        return self._cache[i]


def _batch(cache, idx, spec, rng=None):
    imgs = []
    for i in idx:
        g = cache[int(i)]
        if rng is not None:
            g = augment(g, rng)
        imgs.append(to_tensor(g, spec))
    return torch.from_numpy(np.stack(imgs))


@torch.no_grad()
def recalibrate_batchnorm(model, cache, batch_size=64, device="cpu"):
    """Re-estimate BatchNorm running statistics with a cumulative average over ``cache``."""
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    for start in range(0, len(cache), batch_size):
        idx = range(start, min(start + batch_size, len(cache)))
        if len(idx) > 1:
            model(_batch(cache, idx, cache.spec).to(device))
    for m, mom in zip(norms, saved):
        m.momentum = mom


@torch.no_grad()
def predict_logits(model, cache, batch_size=64, device="cpu"):
    model.eval()
    out = []
    for start in range(0, len(cache), batch_size):
        idx = range(start, min(start + batch_size, len(cache)))
        out.append(model(_batch(cache, idx, cache.spec).to(device)).double().cpu())
    if not out:
        return torch.empty((0, 2), dtype=torch.float64)
    return torch.cat(out)


def _labels(records):
    return torch.tensor([r.label for r in records], dtype=torch.long)


def fit(model, train, val, cfg, preprocess, dataset="unnamed", gabor=None):
    """Fine-tune ``model`` with early stopping and return the best-epoch artifact.

    Each epoch draws ``cfg.epoch_len`` (default ``len(train)``) indices from the
    class-balanced schedule. Training stops once ``cfg.patience`` consecutive
    epochs fail to strictly lower the validation loss, or at ``cfg.max_epochs``;
    the weights from the best epoch are restored.
    """
    if not val:
        raise ParameterError("fit needs a non-empty validation partition")
    device = torch.device(cfg.device)
    torch.manual_seed(cfg.seed)
    model.to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    train_cache, val_cache = ImageCache(train, preprocess), ImageCache(val, preprocess)
    y_train, y_val = _labels(train), _labels(val)
    epoch_len = cfg.epoch_len or len(train)

    es = EarlyStopping(cfg.patience)
    best_state = copy.deepcopy(model.state_dict())
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        schedule = balanced_schedule(train, epoch_len, seed=cfg.seed * 100_003 + epoch)
        rng = np.random.default_rng([cfg.seed, epoch]) if cfg.augment else None
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, epoch_len, cfg.batch_size)):
            idx = schedule[start:start + cfg.batch_size]
            if len(idx) < 2:
                # BatchNorm needs more than one sample per batch
                continue
            x = _batch(train_cache, idx, preprocess, rng).to(device)
            y = y_train[idx].to(device)
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingAborted(epoch, b, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        if cfg.precise_bn:
            recalibrate_batchnorm(model, train_cache, device=device)
        logits = predict_logits(model, val_cache, device=device)
        val_loss = float(F.cross_entropy(logits, y_val.to(logits.device)))
        val_acc = float((logits.argmax(1).cpu() == y_val).double().mean())
        row = {"epoch": epoch, "train_loss": total / max(seen, 1), "val_loss": val_loss, "val_acc": val_acc}
        history.append(row)
        logger.info("%s epoch %d train_loss=%.6f val_loss=%.6f val_acc=%.4f",
                    dataset, epoch, row["train_loss"], val_loss, val_acc)
        if es.step(val_loss):
            best_state = copy.deepcopy(model.state_dict())
        if es.should_stop:
            break
    model.load_state_dict(best_state)
    model.eval()
    provenance = {
        "dataset": dataset,
        "preprocess": preprocess.to_dict(),
        "gabor": bool(gabor_stem(model) is not None if gabor is None else gabor),
        "backbone": cfg.backbone,
        "seed": cfg.seed,
        "best_epoch": es.best_epoch,
        "best_val_loss": es.best_val_loss,
        "epochs_run": es.epoch,
    }
    return ModelArtifact(model, provenance, history)
