import json
import os

import numpy as np
import pytest

from prunekit.data import (Dataset, ingest_dataset, load_image_dir, rings,
                           synth_images, two_gaussians)
from prunekit.errors import ContractError, DatasetError


def test_two_gaussians_regeneration_identical_bytes():
    a = two_gaussians(n_train=1000, n_test=200, seed=7)
    b = two_gaussians(n_train=1000, n_test=200, seed=7)
    assert a.x_train.tobytes() == b.x_train.tobytes()
    assert a.y_train.tobytes() == b.y_train.tobytes()
    assert a.x_test.tobytes() == b.x_test.tobytes()


def test_two_gaussians_seed_changes_data():
    a = two_gaussians(n_train=100, n_test=50, seed=7)
    b = two_gaussians(n_train=100, n_test=50, seed=8)
    assert a.x_train.tobytes() != b.x_train.tobytes()


def test_rings_radii_structure():
    ds = rings(n_train=2000, n_test=100, seed=3, noise=0.05)
    r = np.linalg.norm(ds.x_train, axis=1)
    inner = r[ds.y_train == 0]
    outer = r[ds.y_train == 1]
    assert abs(inner.mean() - 1.0) < 0.05
    assert abs(outer.mean() - 2.0) < 0.05


def test_split_disjointness_enforced():
    ds = two_gaussians(n_train=500, n_test=100, seed=1)
    train_ids = {row.tobytes() for row in ds.x_train}
    assert not any(row.tobytes() in train_ids for row in ds.x_test)
    with pytest.raises(DatasetError):
        Dataset("x", ds.x_train, ds.y_train, ds.x_train[:5], ds.y_train[:5],
                (2,), 2)


def test_synth_images_balanced_and_deterministic():
    a = synth_images(n_train=800, n_test=200, seed=4, classes=4)
    b = synth_images(n_train=800, n_test=200, seed=4, classes=4)
    assert a.x_train.tobytes() == b.x_train.tobytes()
    assert a.y_train.tolist() == b.y_train.tolist()
    counts = np.bincount(a.y_train, minlength=4)
    assert counts.min() > 0.5 * counts.max()  # no degenerate class


def test_synth_images_validation():
    with pytest.raises(ContractError):
        synth_images(classes=1)
    with pytest.raises(ContractError):
        synth_images(margin_drop=1.0)


def _write_image_dir(root, shape=(1, 4, 4), dtype="uint8", n_train=6,
                     n_test=3, break_size=False, drop_file=False):
    rng = np.random.default_rng(0)
    entries = []
    for i in range(n_train + n_test):
        label = i % 2
        split = "train" if i < n_train else "test"
        rel = f"c{label}/img{i}.bin"
        os.makedirs(os.path.join(root, f"c{label}"), exist_ok=True)
        arr = rng.integers(0, 255, size=shape).astype(dtype)
        data = arr.tobytes()
        if break_size and i == 2:
            data = data[:-1]
        if not (drop_file and i == 1):
            with open(os.path.join(root, rel), "wb") as fh:
                fh.write(data)
        entries.append({"file": rel, "label": label, "split": split})
    manifest = {"image_shape": list(shape), "dtype": dtype, "classes": 2,
                "entries": entries}
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh)


def test_image_dir_load_and_normalization(tmp_path):
    _write_image_dir(str(tmp_path))
    ds = load_image_dir(str(tmp_path))
    assert ds.x_train.shape == (6, 1, 4, 4)
    assert ds.x_test.shape == (3, 1, 4, 4)
    assert ds.classes == 2
    # train-split statistics define the normalisation
    assert abs(ds.x_train.mean()) < 1e-5
    assert abs(ds.x_train.std() - 1.0) < 1e-4
    assert abs(ds.x_test.mean()) > 1e-7  # not re-normalised on its own stats


def test_image_dir_missing_file_named(tmp_path):
    _write_image_dir(str(tmp_path), drop_file=True)
    with pytest.raises(DatasetError, match="img1.bin"):
        load_image_dir(str(tmp_path))


def test_image_dir_size_mismatch_named(tmp_path):
    _write_image_dir(str(tmp_path), break_size=True)
    with pytest.raises(DatasetError, match="img2.bin"):
        load_image_dir(str(tmp_path))


def test_image_dir_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_image_dir(str(tmp_path))


def test_ingest_dispatch():
    ds = ingest_dataset("rings", seed=2, n_train=50, n_test=20)
    assert ds.kind == "rings"
    with pytest.raises(ContractError):
        ingest_dataset("mnist")
    with pytest.raises(ContractError):
        ingest_dataset("image-dir")
