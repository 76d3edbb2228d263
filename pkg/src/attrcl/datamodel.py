"""Attributes, items, training pairs/triplets, manifests and the synthetic generator."""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

DELIMITERS = ("-", " ")
MANIFEST_VERSION = 1

# rendering factor kinds, in the order attributes are assigned to them
FACTOR_KINDS = ("stripe", "length", "hue", "taper", "border")
MIN_IMAGE_SIZE = 16


class DataError(ValueError):
    """Raised for invalid datasets, manifests or sampling requests."""


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    subclasses: tuple[str, ...]

    def __post_init__(self):
        if not self.name or not self.name.strip():
            raise DataError("attribute name must be non-empty")
        object.__setattr__(self, "subclasses", tuple(self.subclasses))
        if len(self.subclasses) < 2:
            raise DataError(f"attribute {self.name!r} needs at least 2 subclasses")
        if len(set(self.subclasses)) != len(self.subclasses):
            raise DataError(f"attribute {self.name!r} has duplicate subclass labels")

    @property
    def words(self) -> list[str]:
        return split_words(self.name)


def split_words(name: str) -> list[str]:
    out = name
    for d in DELIMITERS[1:]:
        out = out.replace(d, DELIMITERS[0])
    return [w for w in out.split(DELIMITERS[0]) if w]


@dataclass
class Item:
    id: str
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    labels: dict[str, str]


@dataclass(frozen=True)
class Doublet:
    first: str
    second: str
    attribute: str


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str
    attribute: str


@dataclass
class Task:
    index: int
    attribute: str
    doublets: list[Doublet]

    def __post_init__(self):
        if not self.doublets:
            raise DataError(f"task {self.index} ({self.attribute}) has no doublets")
        for d in self.doublets:
            if d.attribute != self.attribute:
                raise DataError(f"doublet for {d.attribute!r} in task for {self.attribute!r}")


@dataclass
class TaskSequence:
    tasks: list[Task]

    def __post_init__(self):
        names = [t.attribute for t in self.tasks]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate attribute in task sequence: {names}")

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    @property
    def attributes(self) -> list[str]:
        return [t.attribute for t in self.tasks]


class Dataset:
    """A collection of labelled items plus the attribute vocabulary.

    Items are validated on construction: ids must be unique and every label
    must name a declared attribute/subclass.
    """

    def __init__(self, attributes: Sequence[AttributeSpec], items: Sequence[Item]):
        self.attributes = list(attributes)
        self._specs = {a.name: a for a in self.attributes}
        if len(self._specs) != len(self.attributes):
            raise DataError("duplicate attribute names in dataset")
        self.items = list(items)
        self._index: dict[str, int] = {}
        for i, item in enumerate(self.items):
            if item.id in self._index:
                raise DataError(f"duplicate item id {item.id!r}")
            self._index[item.id] = i
            for attr, sub in item.labels.items():
                spec = self._specs.get(attr)
                if spec is None:
                    raise DataError(f"item {item.id!r} labels unknown attribute {attr!r}")
                if sub not in spec.subclasses:
                    raise DataError(
                        f"item {item.id!r} labels subclass {sub!r} not declared for {attr!r}")
        self._images: np.ndarray | None = None

    def __len__(self):
        return len(self.items)

    def spec(self, attribute: str) -> AttributeSpec:
        try:
            return self._specs[attribute]
        except KeyError:
            raise DataError(f"unknown attribute {attribute!r}") from None

    @property
    def attribute_names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def item(self, item_id: str) -> Item:
        return self.items[self._index[item_id]]

    def index_of(self, item_id: str) -> int:
        return self._index[item_id]

    @property
    def images(self) -> np.ndarray:
        """All images stacked as an (N, H, W, 3) float32 array."""
        if self._images is None:
            self._images = np.stack([it.image for it in self.items]).astype(np.float32)
        return self._images

    def images_for(self, ids: Iterable[str]) -> np.ndarray:
        idx = [self._index[i] for i in ids]
        return self.images[idx]

    def carriers(self, attribute: str) -> list[Item]:
        self.spec(attribute)
        return [it for it in self.items if attribute in it.labels]

    def groups(self, attribute: str) -> dict[str, list[str]]:
        """Item ids per subclass, in subclass declaration order."""
        spec = self.spec(attribute)
        out: dict[str, list[str]] = {s: [] for s in spec.subclasses}
        for it in self.items:
            sub = it.labels.get(attribute)
            if sub is not None:
                out[sub].append(it.id)
        return out

    def subset(self, ids: Iterable[str]) -> "Dataset":
        return Dataset(self.attributes, [self.item(i) for i in ids])


# -- manifest -----------------------------------------------------------------

def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def write_manifest(dataset: Dataset, directory: str | os.PathLike) -> Path:
    """Write ``manifest.jsonl`` and one PNG per item under ``directory``."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    path = root / "manifest.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "version": MANIFEST_VERSION,
            "attributes": [{"name": a.name, "subclasses": list(a.subclasses)}
                           for a in dataset.attributes],
        }
        fh.write(json.dumps(header) + "\n")
        for item in dataset.items:
            rel = f"images/{item.id}.png"
            # fixed PNG settings so repeated writes are byte-identical
            Image.fromarray(_to_uint8(item.image), mode="RGB").save(
                root / rel, format="PNG", optimize=False, compress_level=6)
            fh.write(json.dumps({"id": item.id, "image": rel, "labels": item.labels},
                                sort_keys=True) + "\n")
    return path


def load_manifest(path: str | os.PathLike) -> Dataset:
    """Parse a manifest file; image paths resolve relative to its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    attributes: list[AttributeSpec] | None = None
    items: list[Item] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: record must be an object")
            if attributes is None:
                if "attributes" not in rec:
                    raise DataError(f"{path}:{lineno}: first record must declare attributes")
                try:
                    attributes = [AttributeSpec(a["name"], tuple(a["subclasses"]))
                                  for a in rec["attributes"]]
                except (KeyError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: malformed attribute header") from exc
                continue
            try:
                item_id, rel, labels = str(rec["id"]), rec["image"], dict(rec["labels"])
            except (KeyError, TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: record needs id, image and labels") from None
            img_path = root / rel
            if not img_path.is_file():
                raise DataError(f"{path}:{lineno}: image not found: {rel}")
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            items.append(Item(item_id, arr, labels))
    if attributes is None:
        raise DataError(f"{path}: empty manifest")
    return Dataset(attributes, items)


# -- synthetic generator --------------------------------------------------------

@dataclass
class SynthConfig:
    """Synthetic dataset layout.

    ``attributes`` maps attribute name to subclass count. Attribute k is rendered
    through factor ``FACTOR_KINDS[k]``, so at most ``len(FACTOR_KINDS)`` attributes
    are supported and each one varies an independent visual factor.
    """
    attributes: dict[str, int] = field(default_factory=lambda: {
        "stripe-pattern": 4, "fill-length": 4, "hue-color": 4, "taper-shape": 4})
    items_per_subclass: int = 50
    image_size: int = 64
    noise: float = 0.03
    max_shift: float = 0.1

    @classmethod
    def desk(cls, n_attributes: int = 4, n_subclasses: int = 4,
             items_per_subclass: int = 50, image_size: int = 64) -> "SynthConfig":
        names = ["stripe-pattern", "fill-length", "hue-color", "taper-shape", "border-width"]
        if n_attributes > len(names):
            raise DataError(f"at most {len(names)} synthetic attributes are supported")
        return cls({n: n_subclasses for n in names[:n_attributes]},
                   items_per_subclass, image_size)


def _levels(n: int, lo: float, hi: float) -> np.ndarray:
    return np.linspace(lo, hi, n)


def render_item(factors: dict[str, int], counts: dict[str, int], size: int,
                rng: np.random.Generator, noise: float = 0.03,
                max_shift: float = 0.1) -> np.ndarray:
    """Render one item. ``factors`` maps factor kind to subclass index.

    The object is a filled quad whose height follows ``length``, colour follows
    ``hue``, horizontal banding follows ``stripe`` (subclass 0 is plain, then
    progressively finer bands), top-edge narrowing follows ``taper`` and outline
    thickness follows ``border``.
    """
    def level(kind, lo, hi, default):
        if kind not in factors:
            return default
        return _levels(counts[kind], lo, hi)[factors[kind]]

    scale = size / 64.0
    fill = level("length", 0.3, 0.8, 0.55)
    hue = level("hue", 0.0, 0.75, 0.33)
    taper = level("taper", 1.0, 0.3, 1.0)
    border = level("border", 0.0, 4.0, 0.0) * scale
    stripe = 0.0
    if factors.get("stripe", 0) > 0:
        widths = np.geomspace(8.0, 2.0, counts["stripe"] - 1) if counts["stripe"] > 2 else [4.0]
        stripe = widths[factors["stripe"] - 1] * scale

    img = np.zeros((size, size, 3), dtype=np.float64)
    bw = int(round(0.6 * size))
    bh = max(2, int(round(fill * size)))
    shift = int(max_shift * size)
    dx, dy = (int(v) for v in rng.integers(-shift, shift + 1, size=2))
    x0 = (size - bw) // 2 + dx
    y0 = int(round(0.1 * size)) + dy

    yy, xx = np.mgrid[0:bh, 0:bw].astype(np.float64)
    half = bw / 2.0 * (taper + (1.0 - taper) * yy / (bh - 1))
    off = np.abs(xx - (bw - 1) / 2.0)
    mask = off <= half
    rgb = np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.95))
    patch = np.broadcast_to(rgb, (bh, bw, 3)).copy()
    if stripe > 0:
        band = (np.floor(yy / stripe) % 2).astype(bool)
        patch[band] *= 0.2
    if border > 0:
        edge = (off > half - border) | (yy < border) | (yy > bh - 1 - border)
        patch[edge] = 1.0
    patch[~mask] = 0.0

    ys, xs = slice(max(y0, 0), min(y0 + bh, size)), slice(max(x0, 0), min(x0 + bw, size))
    py = slice(ys.start - y0, ys.stop - y0)
    px = slice(xs.start - x0, xs.stop - x0)
    region = mask[py, px]
    img[ys, xs][region] = patch[py, px][region]
    img += rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(config: SynthConfig, seed: int) -> Dataset:
    """Render a labelled dataset; a pure function of ``(config, seed)``.

    For each attribute and each of its subclasses, ``items_per_subclass`` items
    are drawn with that subclass fixed and every other attribute uniform at
    random. Every item is labelled on every attribute.
    """
    if config.image_size < MIN_IMAGE_SIZE:
        raise DataError(f"image size {config.image_size} too small (min {MIN_IMAGE_SIZE})")
    if len(config.attributes) > len(FACTOR_KINDS):
        raise DataError(f"at most {len(FACTOR_KINDS)} synthetic attributes are supported")
    for name, n in config.attributes.items():
        if n < 2:
            raise DataError(f"attribute {name!r} needs at least 2 subclasses, got {n}")
    names = list(config.attributes)
    kinds = dict(zip(names, FACTOR_KINDS))
    specs = [AttributeSpec(n, tuple(f"v{k}" for k in range(config.attributes[n])))
             for n in names]
    counts = {kinds[n]: config.attributes[n] for n in names}

    rng = np.random.default_rng(seed)
    items = []
    for a, name in enumerate(names):
        for s in range(config.attributes[name]):
            for j in range(config.items_per_subclass):
                values = {n: (s if n == name else int(rng.integers(config.attributes[n])))
                          for n in names}
                factors = {kinds[n]: v for n, v in values.items()}
                img = render_item(factors, counts, config.image_size, rng,
                                  config.noise, config.max_shift)
                items.append(Item(f"a{a}s{s}i{j:04d}", img,
                                  {n: f"v{v}" for n, v in values.items()}))
    return Dataset(specs, items)


# -- sampling -------------------------------------------------------------------

def _pair_counts(groups: dict[str, list[str]]) -> tuple[list[str], np.ndarray]:
    subs = list(groups)
    n = np.array([len(groups[s]) for s in subs], dtype=np.float64)
    return subs, n * (n - 1) / 2.0


def sample_doublets(dataset: Dataset, attribute: str, n: int, seed) -> list[Doublet]:
    """Draw ``n`` same-subclass pairs uniformly over all eligible unordered pairs.

    Pairs are drawn with replacement. The order within a pair is random.
    """
    groups = dataset.groups(attribute)
    subs, pairs = _pair_counts(groups)
    if pairs.sum() == 0:
        raise DataError(f"no subclass of {attribute!r} has two items")
    if n < 0:
        raise DataError("n must be non-negative")
    rng = np.random.default_rng(seed)
    p = pairs / pairs.sum()
    chosen = rng.choice(len(subs), size=n, p=p)
    out = []
    for c in chosen:
        ids = groups[subs[c]]
        i, j = rng.choice(len(ids), size=2, replace=False)
        out.append(Doublet(ids[i], ids[j], attribute))
    return out


def sample_triplets(dataset: Dataset, attribute: str, n: int, seed) -> list[Triplet]:
    """Draw ``n`` triplets: a uniform same-subclass pair, then a negative uniform
    over all carriers of a different subclass."""
    groups = dataset.groups(attribute)
    subs, pairs = _pair_counts(groups)
    sizes = np.array([len(groups[s]) for s in subs])
    total = sizes.sum()
    # a pair from subclass k needs some carrier outside k
    eligible = pairs * (total - sizes > 0)
    if n < 0:
        raise DataError("n must be non-negative")
    if n == 0:
        return []
    if eligible.sum() == 0:
        raise DataError(f"no eligible triplet for {attribute!r}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(subs), size=n, p=eligible / eligible.sum())
    out = []
    for c in chosen:
        ids = groups[subs[c]]
        i, j = rng.choice(len(ids), size=2, replace=False)
        others = [x for k, s in enumerate(subs) if k != c for x in groups[s]]
        neg = others[int(rng.integers(len(others)))]
        out.append(Triplet(ids[i], ids[j], neg, attribute))
    return out


def build_task_sequence(datasets: Sequence[Dataset], order: Sequence[str],
                        doublets_per_task: int, seed: int) -> TaskSequence:
    """One task per attribute in ``order``, each with freshly sampled doublets.

    Each task's sampling seed depends only on ``seed`` and the attribute name,
    so permuting ``order`` permutes the tasks without changing their content.
    """
    owner: dict[str, Dataset] = {}
    for ds in datasets:
        for name in ds.attribute_names:
            if name in owner:
                raise DataError(f"attribute {name!r} appears in more than one dataset")
            owner[name] = ds
    if len(set(order)) != len(order):
        raise DataError(f"duplicate attribute in order: {list(order)}")
    tasks = []
    for i, name in enumerate(order):
        if name not in owner:
            raise DataError(f"unknown attribute {name!r} in order")
        task_seed = [seed, *name.encode("utf-8")]
        tasks.append(Task(i, name, sample_doublets(owner[name], name, doublets_per_task,
                                                   task_seed)))
    return TaskSequence(tasks)
