"""scikit-learn style wrapper: one ``partial_fit`` call learns one attribute."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .augment import PerspectiveConfig
from .datamodel import AttributeSpec, Dataset, DataError, Item, Task, sample_doublets
from .encoder import EncoderConfig
from .evaluation import map_from_embeddings
from .losses import Hyperparams
from .trainer import MethodConfig, StepRecord, init_state, train_task


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate an (N, H, W, 3) image batch with values in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped (N, H, W, 3), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square images, got {X.shape[1]}x{X.shape[2]}")
    if image_size is not None and X.shape[1] != image_size:
        raise ValueError(f"model was fitted on {image_size}px images, got {X.shape[1]}px")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X


def _as_labels(y, n: int) -> list[str | None]:
    y = np.asarray(y, dtype=object).ravel()
    if len(y) != n:
        raise ValueError(f"got {len(y)} labels for {n} images")
    return [None if (v is None or v == "" or (isinstance(v, float) and np.isnan(v))) else str(v)
            for v in y]


class ContinualRetriever(TransformerMixin, BaseEstimator):
    """Attribute-conditioned image embedder trained one attribute at a time.

    ``partial_fit`` adds a task (an attribute with its subclass labels);
    ``fit`` resets and learns a whole sequence. ``transform`` embeds images
    for one attribute, ``score`` is retrieval mAP in [0, 1].

    Parameters mirror :class:`~attrcl.trainer.MethodConfig`;
    ``doublets_per_task`` training pairs (or triplets) are drawn per task.
    """

    def __init__(self, method="mclfir", epochs=3, batch_size=16, lr=1e-4, tau=0.3,
                 lambda_kd=1e-4, beta=0.999, margin=0.2, doublets_per_task=500,
                 replay_capacity=2000, perspective_strength=0.2, distill=True,
                 random_state=None):
        self.method = method
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.tau = tau
        self.lambda_kd = lambda_kd
        self.beta = beta
        self.margin = margin
        self.doublets_per_task = doublets_per_task
        self.replay_capacity = replay_capacity
        self.perspective_strength = perspective_strength
        self.distill = distill
        self.random_state = random_state

    def _method_config(self, image_size: int) -> MethodConfig:
        hyper = Hyperparams(tau=self.tau, lambda_kd=self.lambda_kd, margin=self.margin,
                            beta=self.beta, batch=self.batch_size)
        return MethodConfig(method=self.method, hyper=hyper, epochs=self.epochs, lr=self.lr,
                            replay_capacity=self.replay_capacity, distill=self.distill,
                            perspective=PerspectiveConfig(self.perspective_strength),
                            encoder=EncoderConfig(image_size=image_size))

    def _reset(self):
        for name in ("state_", "config_", "attributes_", "dataset_", "loss_trace_",
                     "n_features_in_", "image_size_", "seed_"):
            self.__dict__.pop(name, None)

    # -- data plumbing ---------------------------------------------------------

    def _absorb(self, dataset: Dataset):
        """Merge a dataset's items into the training store kept for replay."""
        if not hasattr(self, "dataset_"):
            self.dataset_ = dataset
            return
        specs = {a.name: a for a in self.dataset_.attributes}
        items = {it.id: Item(it.id, it.image, dict(it.labels)) for it in self.dataset_.items}
        for spec in dataset.attributes:
            if spec.name in specs and specs[spec.name] != spec:
                raise DataError(f"attribute {spec.name!r} redeclared with other subclasses")
            specs[spec.name] = spec
        for it in dataset.items:
            old = items.get(it.id)
            if old is None:
                items[it.id] = Item(it.id, it.image, dict(it.labels))
            elif not np.array_equal(old.image, it.image):
                raise DataError(f"item id {it.id!r} reused for a different image")
            else:
                old.labels.update(it.labels)
        self.dataset_ = Dataset(list(specs.values()), list(items.values()))

    def _dataset_from_arrays(self, X, y, attribute: str) -> Dataset:
        X = check_images(X, getattr(self, "image_size_", None))
        labels = _as_labels(y, len(X))
        subclasses = sorted({v for v in labels if v is not None})
        task = len(getattr(self, "attributes_", []))
        items = [Item(f"t{task}_{i:06d}", X[i], {} if v is None else {attribute: v})
                 for i, v in enumerate(labels)]
        return Dataset([AttributeSpec(attribute, tuple(subclasses))], items)

    # -- estimator API ---------------------------------------------------------

    def partial_fit(self, X, y=None, attribute: str | None = None):
        """Learn one attribute.

        ``X`` is either a :class:`Dataset` (then ``attribute`` picks the task)
        or an (N, H, W, 3) image array with subclass labels ``y``; unlabeled
        entries (None, "" or NaN) do not carry the attribute.
        """
        if attribute is None:
            raise ValueError("partial_fit needs the attribute to learn")
        if attribute in getattr(self, "attributes_", []):
            raise ValueError(f"attribute {attribute!r} was already learned")
        if isinstance(X, Dataset):
            dataset = X
            dataset.spec(attribute)
        else:
            if y is None:
                raise ValueError("labels are required when X is an image array")
            dataset = self._dataset_from_arrays(X, y, attribute)

        if not hasattr(self, "state_"):
            size = dataset.items[0].image.shape[0]
            self.seed_ = int(check_random_state(self.random_state).randint(2**31 - 1))
            self.config_ = self._method_config(size)
            self.state_ = init_state(self.config_, self.seed_)
            self.image_size_ = size
            self.n_features_in_ = size * size * 3
            self.attributes_ = []
            self.loss_trace_: list[StepRecord] = []
        self._absorb(dataset)

        index = len(self.attributes_)
        doublets = sample_doublets(self.dataset_, attribute, self.doublets_per_task,
                                   [self.seed_, *attribute.encode("utf-8")])
        _, records = train_task(self.state_, Task(index, attribute, doublets), self.config_,
                                self.dataset_)
        self.loss_trace_.extend(records)
        self.attributes_.append(attribute)
        return self

    def fit(self, X, y=None, order=None):
        """Reset, then learn every attribute in ``order``.

        ``X`` is a :class:`Dataset` (``y`` unused) or an image array with ``y``
        a mapping attribute -> label array. ``order`` defaults to the
        dataset's attribute order, or the mapping's key order.
        """
        self._reset()
        if isinstance(X, Dataset):
            order = list(order or X.attribute_names)
            for attr in order:
                self.partial_fit(X, attribute=attr)
            return self
        if not isinstance(y, dict) or not y:
            raise ValueError("y must map attribute names to label arrays")
        X = check_images(X)
        order = list(order or y)
        # one shared id space so replayed items resolve across tasks
        items = [Item(f"x{i:06d}", X[i], {}) for i in range(len(X))]
        specs = []
        for attr in order:
            labels = _as_labels(y[attr], len(X))
            specs.append(AttributeSpec(attr, tuple(sorted({v for v in labels if v}))))
            for it, v in zip(items, labels):
                if v is not None:
                    it.labels[attr] = v
        dataset = Dataset(specs, items)
        for attr in order:
            self.partial_fit(dataset, attribute=attr)
        return self

    def transform(self, X, attribute: str | None = None):
        """(N, D) attribute-aware embeddings; defaults to the latest attribute."""
        check_is_fitted(self, "attributes_")
        attribute = attribute or self.attributes_[-1]
        if attribute not in self.attributes_:
            raise KeyError(f"attribute {attribute!r} has not been learned")
        X = check_images(X.images if isinstance(X, Dataset) else X, self.image_size_)
        return self.state_.model.embed(X, attribute)

    def score(self, X, y=None, attribute: str | None = None):
        """Retrieval mAP in [0, 1] with every labeled image querying the rest."""
        check_is_fitted(self, "attributes_")
        attribute = attribute or self.attributes_[-1]
        if isinstance(X, Dataset):
            items = X.carriers(attribute)
            ids = [it.id for it in items]
            labels = [it.labels[attribute] for it in items]
            images = X.images_for(ids)
        else:
            images = check_images(X, self.image_size_)
            labels = _as_labels(y, len(images))
            keep = [i for i, v in enumerate(labels) if v is not None]
            images = images[keep]
            labels = [labels[i] for i in keep]
            ids = [f"q{i:06d}" for i in keep]
        if len(ids) < 2:
            raise ValueError("need at least two labeled images to score")
        return map_from_embeddings(self.transform(images, attribute), ids, labels)

    @property
    def model_(self):
        check_is_fitted(self, "attributes_")
        return self.state_.model
