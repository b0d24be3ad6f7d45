import hashlib
import json
import shutil

import numpy as np
import pytest
from scipy import ndimage

from mhvae.data import (
    DatasetError,
    denormalize,
    epoch_order,
    generate_synthetic,
    import_slices,
    iterate_batches,
    load_manifest,
    normalize,
    random_scene,
    read_png16,
    synthetic_pair,
    write_png16,
)
from mhvae.errors import ContractError


def _digests(root):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def edge_map(img, sigma=1.0, fraction=0.2):
    """Fixed edge detector: top ``fraction`` of smoothed Sobel magnitudes,
    dilated by one pixel to tolerate a one-pixel boundary offset."""
    s = ndimage.gaussian_filter(np.asarray(img, np.float64), sigma)
    mag = np.hypot(ndimage.sobel(s, 0), ndimage.sobel(s, 1))
    return ndimage.binary_dilation(mag >= np.quantile(mag, 1 - fraction))


def test_normalize_endpoints_and_midpoint():
    assert normalize(np.array([0], np.uint16))[0] == -1.0
    assert normalize(np.array([65535], np.uint16))[0] == 1.0
    assert abs(float(normalize(np.array([32767], np.uint16))[0])) < 2 / 65535
    assert denormalize(np.array([0.0]))[0] in (32767, 32768)


def test_round_trip_exhaustive():
    x = np.arange(65536, dtype=np.uint16)
    back = denormalize(normalize(x))
    assert back.dtype == np.uint16
    assert np.abs(back.astype(np.int64) - x).max() <= 1


def test_out_of_range_rejected():
    with pytest.raises(ContractError):
        normalize(np.array([-1]))
    with pytest.raises(ContractError):
        denormalize(np.array([1.5]))


def test_generation_is_deterministic(tmp_path):
    generate_synthetic(tmp_path / "a", 4, 7, 16)
    generate_synthetic(tmp_path / "b", 4, 7, 16)
    assert _digests(tmp_path / "a") == _digests(tmp_path / "b")
    generate_synthetic(tmp_path / "c", 4, 8, 16)
    assert _digests(tmp_path / "a") != _digests(tmp_path / "c")


def test_file_count_and_layout(tmp_path):
    man = generate_synthetic(tmp_path, 10, 1, 16, test_count=3)
    assert len(list((tmp_path / "images").glob("*.png"))) == 20
    assert (tmp_path / "manifest.json").is_file()
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["version"] == 1
    assert doc["geometry"] == {"height": 16, "width": 16, "modalities": 2}
    train, test = man.split("train"), man.split("test")
    assert len(train.samples) == 7 and len(test.samples) == 3
    assert not {s.sample_id for s in train.samples} & {s.sample_id for s in test.samples}


@pytest.mark.parametrize("size", [8, 63, 100])
def test_bad_geometry(tmp_path, size):
    with pytest.raises(ContractError):
        generate_synthetic(tmp_path, 2, 0, size)


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_synthetic(blocker / "sub", 1, 0, 16)


def test_modalities_share_boundaries():
    for i in range(50):
        mr, us = synthetic_pair(7, i, 64, 64).astype(np.float64) / 65535
        a, b = edge_map(mr), edge_map(us)
        assert (a & b).sum() / (a | b).sum() > 0.3


def test_speckle_coefficient_of_variation():
    cvs = []
    for i in range(100):
        us = synthetic_pair(11, i, 64, 64)[1].astype(np.float64) / 65535
        scene = random_scene(np.random.default_rng([11, i]), 64, 64)
        interior = np.zeros(us.shape, bool)
        for r in np.unique(scene.labels)[1:]:
            interior |= ndimage.binary_erosion(scene.labels == r, iterations=4)
        m = ndimage.uniform_filter(us, 5)
        sd = np.sqrt(np.maximum(ndimage.uniform_filter(us * us, 5) - m * m, 0))
        cvs.append(np.median((sd / np.maximum(m, 1e-9))[interior]))
    assert 0.15 <= np.mean(cvs) <= 0.35
    assert all(0.15 <= c <= 0.35 for c in cvs)


def test_mr_is_smoother_than_us():
    mr, us = synthetic_pair(3, 0, 64, 64).astype(np.float64) / 65535
    rough = lambda x: np.abs(np.diff(x, axis=1)).mean()
    assert rough(us) > 2 * rough(mr)


def test_manifest_validation(tmp_path):
    generate_synthetic(tmp_path, 3, 0, 16)
    man = load_manifest(tmp_path)
    assert man.modalities == ["mr", "us"]
    (tmp_path / man.samples[1].files["us"]).unlink()
    with pytest.raises(DatasetError, match="s00001"):
        load_manifest(tmp_path)


def test_manifest_rejects_misshaped_file(tmp_path):
    man = generate_synthetic(tmp_path, 2, 0, 16)
    write_png16(tmp_path / man.samples[0].files["mr"], np.zeros((8, 8), np.uint16))
    with pytest.raises(DatasetError, match="s00000"):
        load_manifest(tmp_path)


def test_manifest_rejects_duplicates_and_versions(tmp_path):
    generate_synthetic(tmp_path, 2, 0, 16)
    path = tmp_path / "manifest.json"
    doc = json.loads(path.read_text())
    doc["samples"][1]["sample_id"] = doc["samples"][0]["sample_id"]
    path.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="duplicate"):
        load_manifest(tmp_path)
    doc["version"] = 2
    path.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="version"):
        load_manifest(tmp_path)


def test_corrupt_file_error_names_sample(tmp_path):
    man = generate_synthetic(tmp_path, 4, 0, 16)
    (tmp_path / man.samples[2].files["mr"]).write_bytes(b"not a png")
    man = load_manifest(tmp_path, check_files=False)
    with pytest.raises(DatasetError, match="s00002"):
        list(iterate_batches(man, 4, shuffle=False))


def test_batch_sizes_and_coverage():
    data = np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1)
    batches = list(iterate_batches(data, 4, 7, 0))
    assert [len(b) for b in batches] == [4, 4, 2]
    seen = np.concatenate([b.ravel() for b in batches])
    assert sorted(seen.tolist()) == list(range(10))


def test_epoch_orders():
    assert np.array_equal(epoch_order(100, 7, 3), epoch_order(100, 7, 3))
    assert not np.array_equal(epoch_order(100, 7, 0), epoch_order(100, 7, 1))
    assert sorted(epoch_order(100, 7, 1)) == list(range(100))
    with pytest.raises(ContractError):
        list(iterate_batches(np.zeros((3, 1, 1, 1)), 0))


def test_import_slices_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pairs = [rng.integers(0, 65536, (2, 16, 16), dtype=np.uint16) for _ in range(3)]
    man = import_slices(tmp_path, pairs, ["t2", "ius"], ["a", "b", "c"], ["train", "train", "test"])
    again = load_manifest(tmp_path)
    assert again.modalities == ["t2", "ius"]
    for entry, pair in zip(again.samples, pairs):
        for name, img in zip(again.modalities, pair):
            assert np.array_equal(read_png16(tmp_path / entry.files[name]), img)
    assert len(man.split("test").samples) == 1
