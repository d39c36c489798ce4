"""Estimator facade: scikit-learn style fit/predict over the search engine
and the retraining harness.

FactorizedSearch is a transformer-ish searcher: fit(X, y) runs the tri-level
search and exposes the result as fitted attributes (genotype_, history_,
alpha_, beta_).  GenotypeClassifier trains a derived architecture from
scratch and predicts classes.  Both follow the sklearn contract: __init__
stores hyperparameters verbatim, validation happens in fit, get_params and
clone work unmodified.
"""

import numpy as np

from sklearn.base import BaseEstimator, ClassifierMixin

from .datasets import Dataset, apply_stats, compute_stats
from .errors import ConfigError
from .evaluator import TrainConfig, retrain
from .genotype import Genotype, parse_genotype, serialize_genotype
from .search import SearchConfig, SearchEngine
from .space import SpaceConfig
from .validation import check_image_batch, check_labels


class FactorizedSearch(BaseEstimator):
    """Differentiable architecture search over the factorized operator space.

    fit(X, y) splits (X, y) into weight/architecture halves, trains the
    supernetwork with tri-level updates, and stores the derived genotype.

    Parameters mirror SearchConfig; `regular_ops`/`activation_ops`/`nodes`
    shape the space (None keeps the full pools).
    """

    def __init__(self, epochs=15, batch_size=32, channels=8, cells=8,
                 mode="factorized", fixed_activation=None, split=(0.5, 0.5),
                 w_lr=0.05, w_lr_min=0.001, arch_lr=6e-4, warmup_epochs=0,
                 pad_crop=0, hflip=False, regular_ops=None, activation_ops=None,
                 nodes=4, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.channels = channels
        self.cells = cells
        self.mode = mode
        self.fixed_activation = fixed_activation
        self.split = split
        self.w_lr = w_lr
        self.w_lr_min = w_lr_min
        self.arch_lr = arch_lr
        self.warmup_epochs = warmup_epochs
        self.pad_crop = pad_crop
        self.hflip = hflip
        self.regular_ops = regular_ops
        self.activation_ops = activation_ops
        self.nodes = nodes
        self.seed = seed

    def _space(self) -> SpaceConfig:
        kwargs = {"nodes": self.nodes}
        if self.regular_ops is not None:
            kwargs["regular_ops"] = tuple(self.regular_ops)
        if self.activation_ops is not None:
            kwargs["activation_ops"] = tuple(self.activation_ops)
        return SpaceConfig(**kwargs)

    def fit(self, X, y, beta_snapshot=None):
        X = check_image_batch(X)
        y = check_labels(y, X.shape[0])
        classes = int(y.max()) + 1
        ds = Dataset(X, y, classes, "fit")
        stats = compute_stats(ds)
        ds = apply_stats(ds, stats)
        cfg = SearchConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            channels=self.channels, cells=self.cells, mode=self.mode,
            fixed_activation=self.fixed_activation, split=tuple(self.split),
            w_lr=self.w_lr, w_lr_min=self.w_lr_min, arch_lr=self.arch_lr,
            warmup_epochs=self.warmup_epochs, pad_crop=self.pad_crop,
            hflip=self.hflip, seed=self.seed)
        engine = SearchEngine(self._space(), cfg, ds, beta_snapshot=beta_snapshot)
        result = engine.run()
        self.genotype_ = result.genotype
        self.history_ = result.history
        arrays = result.arch_arrays
        self.alpha_ = {k: v for k, v in arrays.items() if k.startswith(("alpha_", "flat_"))}
        self.beta_ = {k: v for k, v in arrays.items() if k.startswith("beta_")}
        self.space_ = engine.space
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def genotype_text_(self) -> str:
        if not hasattr(self, "genotype_"):
            raise ConfigError("call fit before reading the genotype")
        return serialize_genotype(self.genotype_)


class GenotypeClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier built by retraining one discrete genotype.

    `genotype` accepts a Genotype or its text serialization (text keeps the
    estimator cloneable with plain params).
    """

    def __init__(self, genotype=None, epochs=20, batch_size=64, channels=16,
                 cells=8, lr=0.03, droppath=0.2, cutout_length=0,
                 label_smoothing=0.0, auxiliary=True, aux_weight=0.4,
                 pad_crop=4, hflip=False, seed=0):
        self.genotype = genotype
        self.epochs = epochs
        self.batch_size = batch_size
        self.channels = channels
        self.cells = cells
        self.lr = lr
        self.droppath = droppath
        self.cutout_length = cutout_length
        self.label_smoothing = label_smoothing
        self.auxiliary = auxiliary
        self.aux_weight = aux_weight
        self.pad_crop = pad_crop
        self.hflip = hflip
        self.seed = seed

    def _genotype(self) -> Genotype:
        if self.genotype is None:
            raise ConfigError("GenotypeClassifier needs a genotype")
        if isinstance(self.genotype, Genotype):
            return self.genotype
        return parse_genotype(str(self.genotype))

    def fit(self, X, y):
        X = check_image_batch(X)
        y = check_labels(y, X.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigError("need at least two classes")
        ds = Dataset(X, encoded.astype(np.int64), len(self.classes_), "fit")
        self.stats_ = compute_stats(ds)
        ds = apply_stats(ds, self.stats_)
        cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            channels=self.channels, cells=self.cells, lr=self.lr,
            droppath=self.droppath, cutout_length=self.cutout_length,
            label_smoothing=self.label_smoothing, auxiliary=self.auxiliary,
            aux_weight=self.aux_weight, pad_crop=self.pad_crop,
            hflip=self.hflip, seed=self.seed)
        result = retrain(self._genotype(), ds, None, cfg)
        self.net_ = result.net
        self.history_ = result.rows
        self.param_count_ = result.param_count
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _logits(self, X) -> np.ndarray:
        if not hasattr(self, "net_"):
            raise ConfigError("call fit before predict")
        X = check_image_batch(X)
        ds = apply_stats(Dataset(X, np.zeros(len(X), dtype=np.int64),
                                 len(self.classes_), "predict"), self.stats_)
        self.net_.eval()
        chunks = []
        for start in range(0, len(X), self.batch_size):
            logits, _ = self.net_.forward(ds.images[start : start + self.batch_size])
            chunks.append(logits.data)
        return np.concatenate(chunks)

    def predict_proba(self, X) -> np.ndarray:
        z = self._logits(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        z = self._logits(X)
        return self.classes_[z.argmax(axis=1)]
