"""Dataset ingestion and preprocessing for MNIST-style image data."""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import math
import os
import struct
import urllib.request
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.ndimage

from qksttn.errors import ConfigError, DomainError, IngestionError, SamplingError

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_DIR_ENV = "QKSTTN_DATA_DIR"

SOURCES = {
    "mnist": {
        "subdir": "mnist",
        "url": "https://storage.googleapis.com/cvdf-datasets/mnist/",
    },
    "fashion-mnist": {
        "subdir": "fashion-mnist",
        "url": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
    },
    # 5,000-image subset bundled with mlxtend; kept apart so it is never mistaken for MNIST
    "mnist-5k": {
        "subdir": "mnist-5k",
        "url": None,
    },
}
FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    X: np.ndarray  # (N, p), values in [0, 1]
    y: np.ndarray  # (N,)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise DomainError(f"X {self.X.shape} and y {self.y.shape} disagree")

    def __len__(self) -> int:
        return self.y.shape[0]

    def subset(self, idx, step: dict | None = None) -> "Dataset":
        prov = dict(self.provenance)
        if step is not None:
            prov["steps"] = list(prov.get("steps", [])) + [step]
        return Dataset(self.X[idx], self.y[idx], prov)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()

    @property
    def pair(self):
        return self.X, self.y


def _read_bytes(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 8:
        raise IngestionError(f"{what}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IngestionError(f"{what}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"{what}: truncated dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    body = raw[header:]
    if len(body) < size:
        raise IngestionError(f"{what}: truncated data, expected {size} bytes, got {len(body)}")
    return np.frombuffer(body[:size], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Images scaled to [0, 1] and flattened row-major, with integer labels."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img_raw = _read_bytes(images_path)
    lab_raw = _read_bytes(labels_path)
    images = _parse_idx(img_raw, IMAGE_MAGIC, "images")
    labels = _parse_idx(lab_raw, LABEL_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}"
        )
    X = images.reshape(images.shape[0], -1).astype(float) / 255.0
    prov = {
        "sources": {
            str(images_path.name): hashlib.sha256(img_raw).hexdigest(),
            str(labels_path.name): hashlib.sha256(lab_raw).hexdigest(),
        },
        "image_shape": list(images.shape[1:]),
        "steps": [],
    }
    return Dataset(X, labels.astype(int), prov)


def resolve_data_dir(data_dir=None) -> Path:
    path = data_dir or os.environ.get(DATA_DIR_ENV)
    if not path:
        raise ConfigError(f"no data directory: pass --data-dir or set {DATA_DIR_ENV}")
    return Path(path)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise IngestionError(f"{stem}[.gz] not found in {directory}")


def load_split(name: str, split: str, data_dir=None) -> Dataset:
    """``name`` is ``mnist`` or ``fashion-mnist``; ``split`` is ``train`` or ``test``."""
    if name not in SOURCES:
        raise ConfigError(f"unknown dataset {name!r}")
    if split not in FILES:
        raise ConfigError(f"unknown split {split!r}")
    directory = resolve_data_dir(data_dir) / SOURCES[name]["subdir"]
    img, lab = FILES[split]
    ds = load_idx(_find(directory, img), _find(directory, lab))
    ds.provenance.update(dataset=name, split=split)
    return ds


def available(name: str = "mnist", data_dir=None) -> bool:
    try:
        directory = resolve_data_dir(data_dir) / SOURCES[name]["subdir"]
        for stems in FILES.values():
            for stem in stems:
                _find(directory, stem)
    except (ConfigError, IngestionError):
        return False
    return True


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an (uncompressed) IDX file."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def fetch(name: str, data_dir=None, base_url: str | None = None) -> dict:
    """Download the four IDX files of a dataset and record their SHA-256 digests."""
    if name not in SOURCES:
        raise ConfigError(f"unknown dataset {name!r}")
    if name == "mnist-5k":
        return fetch_mlxtend_subset(data_dir)
    directory = resolve_data_dir(data_dir) / SOURCES[name]["subdir"]
    directory.mkdir(parents=True, exist_ok=True)
    url = base_url or SOURCES[name]["url"]
    digests = {}
    for stems in FILES.values():
        for stem in stems:
            target = directory / (stem + ".gz")
            log.info("downloading %s", url + stem + ".gz")
            with urllib.request.urlopen(url + stem + ".gz", timeout=60) as resp:
                payload = resp.read()
            target.write_bytes(payload)
            digests[target.name] = hashlib.sha256(payload).hexdigest()
    (directory / "SHA256SUMS.json").write_text(json.dumps(digests, indent=2, sort_keys=True))
    return digests


def fetch_mlxtend_subset(data_dir=None, test_per_class: int = 100) -> dict:
    """Write the 5,000-image MNIST subset shipped with ``mlxtend`` as IDX files.

    Offline stand-in only, loaded as dataset ``mnist-5k``. It holds 500
    training images per digit, split here into a train part and a held-out
    ``test_per_class`` tail per digit.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    X = np.asarray(X, dtype=np.uint8).reshape(-1, 28, 28)
    y = np.asarray(y, dtype=np.uint8)
    train_idx, test_idx = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        train_idx.extend(idx[:-test_per_class])
        test_idx.extend(idx[-test_per_class:])
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)
    directory = resolve_data_dir(data_dir) / SOURCES["mnist-5k"]["subdir"]
    directory.mkdir(parents=True, exist_ok=True)
    write_idx(directory / FILES["train"][0], X[train_idx])
    write_idx(directory / FILES["train"][1], y[train_idx])
    write_idx(directory / FILES["test"][0], X[test_idx])
    write_idx(directory / FILES["test"][1], y[test_idx])
    digests = {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
               for p in sorted(directory.glob("*-ubyte"))}
    (directory / "SHA256SUMS.json").write_text(
        json.dumps({"source": "mlxtend-5k", **digests}, indent=2, sort_keys=True))
    return digests


def filter_pair(dataset: Dataset, a: int, b: int) -> Dataset:
    """Keep labels ``a`` and ``b`` (in order), relabelled to 0 and 1."""
    if a == b:
        raise DomainError("pair labels must differ")
    keep = np.flatnonzero((dataset.y == a) | (dataset.y == b))
    if keep.size == 0:
        raise DomainError(f"no examples with labels {a} or {b}")
    out = dataset.subset(keep, {"op": "filter_pair", "a": int(a), "b": int(b)})
    out.y = (out.y == b).astype(int)
    return out


def filter_classes(dataset: Dataset, classes) -> Dataset:
    """Keep the listed labels, relabelled to their position in ``classes``."""
    classes = [int(c) for c in classes]
    if len(set(classes)) != len(classes) or len(classes) < 2:
        raise DomainError("need at least two distinct classes")
    keep = np.flatnonzero(np.isin(dataset.y, classes))
    if keep.size == 0:
        raise DomainError(f"no examples with labels {classes}")
    out = dataset.subset(keep, {"op": "filter_classes", "classes": classes})
    lookup = {c: i for i, c in enumerate(classes)}
    out.y = np.array([lookup[v] for v in out.y], dtype=int)
    return out


def _stratified_counts(y: np.ndarray, total: int) -> dict:
    classes, counts = np.unique(y, return_counts=True)
    quota = counts * total / counts.sum()
    base = np.floor(quota).astype(int)
    rest = total - base.sum()
    order = np.argsort(-(quota - base), kind="stable")
    base[order[:rest]] += 1
    return dict(zip(classes.tolist(), base.tolist()))


def subsample(dataset: Dataset, f: float, rng: np.random.Generator) -> Dataset:
    """Class-stratified uniform sample of ceil(f * N) examples, original order kept."""
    if not 0 < f <= 1:
        raise DomainError(f"fraction must be in (0, 1], got {f}")
    n = len(dataset)
    if f == 1:
        return dataset.subset(np.arange(n), {"op": "subsample", "f": 1.0})
    total = math.ceil(f * n)
    alloc = _stratified_counts(dataset.y, total)
    if any(k == 0 for k in alloc.values()) or total < 2:
        raise SamplingError(f"fraction {f} leaves a class without examples")
    chosen = []
    for c, k in alloc.items():
        idx = np.flatnonzero(dataset.y == c)
        chosen.append(rng.choice(idx, size=k, replace=False))
    keep = np.sort(np.concatenate(chosen))
    return dataset.subset(keep, {"op": "subsample", "f": float(f)})


def deskew(image) -> np.ndarray:
    """Moment-based shear correction of one 2-D image, centering its mass."""
    img = np.asarray(image, dtype=float)
    total = img.sum()
    if total <= 0:
        return img.copy()
    rows, cols = np.indices(img.shape)
    r_mean = (rows * img).sum() / total
    c_mean = (cols * img).sum() / total
    mu02 = (((rows - r_mean) ** 2) * img).sum() / total
    mu11 = ((rows - r_mean) * (cols - c_mean) * img).sum() / total
    alpha = mu11 / mu02 if mu02 > 0 else 0.0
    r0, c0 = (np.asarray(img.shape) - 1) / 2.0
    # output (r, c) samples input (r + r_mean - r0, c + alpha (r - r0) + c_mean - c0)
    matrix = np.array([[1.0, 0.0], [alpha, 1.0]])
    offset = np.array([r_mean - r0, c_mean - c0 - alpha * r0])
    out = scipy.ndimage.affine_transform(img, matrix, offset=offset, order=1,
                                         mode="constant", cval=0.0)
    return np.clip(out, 0.0, None)


def deskew_dataset(dataset: Dataset, shape=(28, 28)) -> Dataset:
    X = np.stack([deskew(x.reshape(shape)).ravel() for x in dataset.X])
    prov = dict(dataset.provenance)
    prov["steps"] = list(prov.get("steps", [])) + [{"op": "deskew"}]
    return Dataset(np.clip(X, 0.0, 1.0), dataset.y.copy(), prov)


def cv_folds_indices(y, k: int, rng: np.random.Generator) -> list:
    """Stratified (train_idx, val_idx) pairs covering all examples exactly once."""
    y = np.asarray(y)
    if k < 2:
        raise ConfigError(f"need k >= 2 folds, got {k}")
    if k > len(y):
        raise ConfigError(f"cannot make {k} folds from {len(y)} examples")
    order = np.concatenate([rng.permutation(np.flatnonzero(y == c)) for c in np.unique(y)])
    fold_of = np.empty(len(y), dtype=int)
    fold_of[order] = np.arange(len(y)) % k
    out = []
    for i in range(k):
        out.append((np.flatnonzero(fold_of != i), np.flatnonzero(fold_of == i)))
    return out


def cv_folds(dataset: Dataset, k: int, rng: np.random.Generator) -> list:
    return [
        (dataset.subset(tr, {"op": "cv_train", "fold": i, "k": k}),
         dataset.subset(va, {"op": "cv_validation", "fold": i, "k": k}))
        for i, (tr, va) in enumerate(cv_folds_indices(dataset.y, k, rng))
    ]


def with_provenance(dataset: Dataset, **extra) -> Dataset:
    prov = dict(dataset.provenance)
    prov.update(extra)
    return replace(dataset, provenance=prov)
