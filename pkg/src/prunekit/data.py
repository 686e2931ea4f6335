"""Dataset generation and ingestion.

Built-in synthetic tasks (all seed-deterministic):

* ``two-gaussians``: 2-d binary classification, two isotropic blobs.
* ``rings``: 2-d binary classification, two concentric noisy rings.
* ``synth-images``: image classification where labels come from a frozen,
  randomly initialised convolutional teacher evaluated on noise images;
  class boundaries inherit the teacher's capacity, which makes the task
  sensitive to how much of a student survives compression.

On-disk datasets use a directory of fixed-size raw image files plus a
``manifest.json`` listing file, label and split per entry; normalization
statistics are computed on the train split only.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ContractError, DatasetError

KINDS = ("two-gaussians", "rings", "synth-images", "image-dir")


@dataclass
class Dataset:
    kind: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    input_shape: Tuple[int, ...]
    classes: int

    def __post_init__(self):
        train_ids = _sample_ids(self.x_train)
        test_ids = _sample_ids(self.x_test)
        if train_ids & test_ids:
            raise DatasetError("train and test splits share samples")


def _sample_ids(x: np.ndarray) -> set:
    return {arr.tobytes() for arr in x.reshape(len(x), -1)}


def two_gaussians(n_train: int = 2000, n_test: int = 500, seed: int = 0,
                  noise: float = 0.9, separation: float = 2.0) -> Dataset:
    rng = np.random.default_rng([seed, 100])
    n = n_train + n_test
    labels = rng.integers(0, 2, size=n)
    centers = np.where(labels[:, None] == 0, -separation / 2, separation / 2)
    x = centers + rng.normal(0.0, noise, size=(n, 2))
    x = x.astype(np.float32)
    return Dataset("two-gaussians", x[:n_train], labels[:n_train],
                   x[n_train:], labels[n_train:], (2,), 2)


def rings(n_train: int = 2000, n_test: int = 500, seed: int = 0,
          noise: float = 0.2, radii: Tuple[float, float] = (1.0, 2.0)) -> Dataset:
    rng = np.random.default_rng([seed, 101])
    n = n_train + n_test
    labels = rng.integers(0, 2, size=n)
    r = np.where(labels == 0, radii[0], radii[1]) + rng.normal(0, noise, size=n)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).astype(np.float32)
    return Dataset("rings", x[:n_train], labels[:n_train],
                   x[n_train:], labels[n_train:], (2,), 2)


def synth_images(n_train: int = 3000, n_test: int = 800, seed: int = 0,
                 classes: int = 4, image_size: int = 8, channels: int = 1,
                 teacher_widths: Tuple[int, int] = (16, 32),
                 teacher_sparsity: float = 0.85,
                 margin_drop: float = 0.4) -> Dataset:
    """Noise images labelled by a frozen random conv teacher.

    The teacher is itself sparse: its weights are magnitude-pruned to
    ``teacher_sparsity`` (kept entries rescaled to preserve activation
    variance), so the label function lives on wide, sparsely-connected
    features. A weight-pruned student of matching budget can represent it;
    a channel-thinned one of the same parameter count structurally cannot,
    which is exactly the contrast compression experiments need to expose.

    Raw teacher logits are standardised per class over the generated pool
    before the argmax; without this, rectified features let a single class
    dominate every input. The ``margin_drop`` fraction of samples closest
    to a decision boundary is discarded so labels carry a margin, leaving
    boundary complexity (and hence capacity sensitivity) intact.
    """
    from .nn import build_cnn_small
    from .tensor import Tensor, no_grad

    if classes < 2:
        raise ContractError(f"need at least 2 classes, got {classes}")
    if not 0.0 <= margin_drop < 1.0:
        raise ContractError(f"margin_drop must lie in [0,1), got {margin_drop}")
    if not 0.0 <= teacher_sparsity < 1.0:
        raise ContractError(
            f"teacher_sparsity must lie in [0,1), got {teacher_sparsity}")
    rng = np.random.default_rng([seed, 102])
    teacher = build_cnn_small((channels, image_size, image_size),
                              teacher_widths, classes,
                              np.random.default_rng([seed, 103]))
    if teacher_sparsity > 0.0:
        gain = 1.0 / np.sqrt(1.0 - teacher_sparsity)
        for _, param in teacher.prunables():
            w = param.weights.data
            cut = np.quantile(np.abs(w), teacher_sparsity)
            param.weights.data = np.where(np.abs(w) < cut, 0.0, w * gain) \
                .astype(w.dtype)
    n = n_train + n_test
    n_pool = int(math.ceil(n / (1.0 - margin_drop))) + 1
    x = rng.normal(0.0, 1.0, size=(n_pool, channels, image_size, image_size)) \
        .astype(np.float32)
    logits = np.empty((n_pool, classes), dtype=np.float64)
    with no_grad():
        for start in range(0, n_pool, 512):
            xb = x[start:start + 512]
            logits[start:start + 512] = teacher.forward(Tensor(xb)).data
    z = (logits - logits.mean(axis=0)) / np.maximum(logits.std(axis=0), 1e-12)
    order = np.sort(z, axis=1)
    margin = order[:, -1] - order[:, -2]
    keep = np.argsort(-margin, kind="stable")[:n]
    keep.sort()  # preserve generation order among the kept samples
    x = x[keep]
    labels = z[keep].argmax(axis=1).astype(np.int64)
    return Dataset("synth-images", x[:n_train], labels[:n_train],
                   x[n_train:], labels[n_train:],
                   (channels, image_size, image_size), classes)


def load_image_dir(path: str) -> Dataset:
    """Raw-image directory: manifest.json + fixed-size binary image files.

    Manifest schema::

        {"image_shape": [C, H, W], "dtype": "uint8" | "float32",
         "classes": K,
         "entries": [{"file": "cls0/img0.bin", "label": 0, "split": "train"}, ...]}

    Per-channel normalization uses train-split statistics only.
    """
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DatasetError(f"manifest not found: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"manifest is not valid JSON: {exc}") from exc
    for key in ("image_shape", "dtype", "classes", "entries"):
        if key not in manifest:
            raise DatasetError(f"manifest missing key {key!r}")
    shape = tuple(int(v) for v in manifest["image_shape"])
    if len(shape) != 3 or any(v < 1 for v in shape):
        raise DatasetError(f"image_shape must be [C,H,W] positive, got {shape}")
    dtype = np.dtype(manifest["dtype"])
    if dtype not in (np.dtype("uint8"), np.dtype("float32")):
        raise DatasetError(f"unsupported image dtype {manifest['dtype']!r}")
    expect_bytes = int(np.prod(shape)) * dtype.itemsize

    splits = {"train": ([], []), "test": ([], [])}
    for i, entry in enumerate(manifest["entries"]):
        for key in ("file", "label", "split"):
            if key not in entry:
                raise DatasetError(f"entry {i} missing key {key!r}")
        fpath = os.path.join(path, entry["file"])
        if not os.path.isfile(fpath):
            raise DatasetError(f"missing image file: {entry['file']}")
        size = os.path.getsize(fpath)
        if size != expect_bytes:
            raise DatasetError(
                f"{entry['file']}: has {size} bytes, expected {expect_bytes} "
                f"for shape {shape} {dtype}")
        label = int(entry["label"])
        if not 0 <= label < manifest["classes"]:
            raise DatasetError(f"{entry['file']}: label {label} out of range")
        if entry["split"] not in splits:
            raise DatasetError(f"{entry['file']}: unknown split {entry['split']!r}")
        img = np.fromfile(fpath, dtype=dtype).reshape(shape).astype(np.float32)
        xs, ys = splits[entry["split"]]
        xs.append(img)
        ys.append(label)
    if not splits["train"][0]:
        raise DatasetError("manifest contains no train entries")
    if not splits["test"][0]:
        raise DatasetError("manifest contains no test entries")

    x_train = np.stack(splits["train"][0])
    x_test = np.stack(splits["test"][0])
    mean = x_train.mean(axis=(0, 2, 3), keepdims=True)
    std = x_train.std(axis=(0, 2, 3), keepdims=True)
    std[std == 0] = 1.0
    x_train = (x_train - mean) / std
    x_test = (x_test - mean) / std
    return Dataset("image-dir", x_train.astype(np.float32),
                   np.asarray(splits["train"][1], dtype=np.int64),
                   x_test.astype(np.float32),
                   np.asarray(splits["test"][1], dtype=np.int64),
                   shape, int(manifest["classes"]))


def ingest_dataset(kind: str, seed: int = 0, path: Optional[str] = None,
                   **kw) -> Dataset:
    """Dispatch on dataset kind; synthetic kinds take generation keywords."""
    if kind == "two-gaussians":
        return two_gaussians(seed=seed, **kw)
    if kind == "rings":
        return rings(seed=seed, **kw)
    if kind == "synth-images":
        return synth_images(seed=seed, **kw)
    if kind == "image-dir":
        if not path:
            raise ContractError("image-dir datasets need a path")
        return load_image_dir(path)
    raise ContractError(f"unknown dataset kind {kind!r} (expected one of {KINDS})")
