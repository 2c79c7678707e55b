import json

import numpy as np
import pytest

from conftest import small_config
from stsun.checks import perturb
from stsun.data import (Dataset, DatasetFormatError, DatasetManifest, SyntheticSpec, crop, generate_synthetic,
                        labels_from_maps, pad_to_divisible, read_dataset, read_split, synth_frame_maps,
                        write_dataset, write_split)
from stsun.metadata import ValidationError
from stsun.metrics import classify
from stsun.model import STSUN
from stsun.training import output_spec, predict_dataset


def random_dataset(rng, n=3, task="SCD", t1=2, cats=("background", "water", "forest")):
    t2 = {"SS": 1, "BCD": t1 - 1, "SCD": t1}[task]
    cats = ["change"] if task == "BCD" else list(cats)
    man = DatasetManifest("rand", task, t1, t2, 2, cats, 6, 5, 0.5, [500.0, 800.0],
                          [float(t) for t in range(t1)], "train", n)
    images = rng.standard_normal((n, t1, 2, 6, 5)).astype(np.float32).astype(np.float64)
    labels = rng.integers(0, 2 if len(cats) == 1 else len(cats), (n, t2, 6, 5)).astype(np.uint8)
    return Dataset(man, images, labels)


def test_round_trip_bitwise(tmp_path, rng):
    ds = random_dataset(rng)
    write_split(tmp_path / "train", ds)
    back = read_split(tmp_path / "train")
    assert back.manifest == ds.manifest
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.labels.tobytes() == ds.labels.tobytes()
    meta = json.loads((tmp_path / "train" / "meta.json").read_text())
    assert list(meta) == sorted(meta)


def test_extent_mismatch_names_field(rng):
    ds = random_dataset(rng, t1=2)
    bad = Dataset(ds.manifest, np.zeros((3, 3, 2, 6, 5)), ds.labels)
    with pytest.raises(ValidationError, match="T1"):
        bad.validate()


def test_label_out_of_range_rejected(rng):
    ds = random_dataset(rng)
    ds.labels[0, 0, 0, 0] = 3
    with pytest.raises(ValidationError, match="class index 3"):
        ds.validate()
    bcd = random_dataset(rng, task="BCD")
    bcd.labels[0, 0, 0, 0] = 2
    with pytest.raises(ValidationError):
        bcd.validate()


def test_file_level_errors(tmp_path, rng):
    ds = random_dataset(rng)
    write_split(tmp_path / "s", ds)
    img = tmp_path / "s" / "images.f32"
    img.write_bytes(img.read_bytes()[:-4])
    with pytest.raises(DatasetFormatError, match="truncated"):
        read_split(tmp_path / "s")
    write_split(tmp_path / "s", ds)
    meta = json.loads((tmp_path / "s" / "meta.json").read_text())
    meta["format"] = "something-else"
    (tmp_path / "s" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetFormatError):
        read_split(tmp_path / "s")
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "missing")


def test_manifest_rules(rng):
    ds = random_dataset(rng, task="BCD", t1=3)
    assert ds.manifest.T2 == 2
    with pytest.raises(ValidationError, match="T2"):
        DatasetManifest("x", "BCD", 3, 3, 1, ["change"], 4, 4, 1.0, [500], [0, 1, 2]).validate()
    with pytest.raises(ValidationError, match="categories"):
        DatasetManifest("x", "BCD", 2, 1, 1, ["water"], 4, 4, 1.0, [500], [0, 1]).validate()


def test_synthetic_is_deterministic_and_valid():
    spec = SyntheticSpec(task="SCD", T1=3, n_train=4, n_val=2, n_test=2, seed=11)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for split in ("train", "val", "test"):
        a[split].validate()
        assert a[split].images.tobytes() == b[split].images.tobytes()
        assert a[split].labels.tobytes() == b[split].labels.tobytes()
    assert not np.array_equal(a["train"].images, a["val"].images[:2].repeat(2, axis=0))


def test_change_rate_zero_means_no_change():
    d = generate_synthetic(SyntheticSpec(task="BCD", T1=3, categories=["change"], change_rate=0.0,
                                         n_train=10, n_val=0, n_test=0))
    assert d["train"].labels.max() == 0


def test_change_rate_one_marks_every_footprint():
    spec = SyntheticSpec(task="BCD", T1=2, categories=["change"], change_rate=1.0, n_train=0, n_val=0, n_test=0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        maps = synth_frame_maps(rng, spec)
        labels = labels_from_maps(maps, spec)
        # independent pixel loop over the frame maps
        for i in range(spec.H1):
            for j in range(spec.W1):
                changed = maps[1, i, j] != maps[0, i, j]
                assert labels[0, i, j] == int(changed)
                assert changed == (maps[0, i, j] != 0)   # objects occupy non-background pixels


def test_labels_follow_maps_for_each_task():
    rng = np.random.default_rng(1)
    ss = SyntheticSpec(task="SS", categories=["background", "building", "water"], n_train=0, n_val=0, n_test=0)
    maps = synth_frame_maps(rng, ss)
    np.testing.assert_array_equal(labels_from_maps(maps, ss), maps)
    one = SyntheticSpec(task="SS", categories=["water"], n_train=0, n_val=0, n_test=0)
    maps = synth_frame_maps(rng, one)
    np.testing.assert_array_equal(labels_from_maps(maps, one), (maps == one.land_cover.index("water")))


def test_synthetic_spec_validation():
    with pytest.raises(ValidationError):
        SyntheticSpec(change_rate=1.5)
    with pytest.raises(ValidationError):
        SyntheticSpec(noise=-1)
    with pytest.raises(ValidationError):
        SyntheticSpec.from_dict({"bogus": 1})


def test_write_and_read_all_splits(tmp_path):
    d = generate_synthetic(SyntheticSpec(n_train=3, n_val=2, n_test=1))
    write_dataset(tmp_path, d)
    back = read_dataset(tmp_path)
    assert {k: len(v) for k, v in back.items()} == {"train": 3, "val": 2, "test": 1}


def test_pad_to_divisible(rng):
    img = rng.standard_normal((2, 1, 3, 32, 32))
    lab = rng.integers(0, 2, (2, 1, 32, 32))
    same = pad_to_divisible(img, lab, 16, 16)
    assert same[0] is img and same[2] == (0, 0, 32, 32)
    img30, lab30 = img[..., :30, :30], lab[..., :30, :30]
    pi, pl, box = pad_to_divisible(img30, lab30, 16, 16)
    assert pi.shape[-2:] == (32, 32) and pl.shape[-2:] == (32, 32)
    assert box == (0, 0, 30, 30)
    np.testing.assert_array_equal(crop(pi, box), img30)
    np.testing.assert_array_equal(pi[..., 30, :30], img30[..., 28, :])   # reflection about row 29


def test_predict_then_crop_matches_manual_padding(rng):
    m = STSUN(small_config())
    perturb(m.store)
    ds = random_dataset(rng, task="SCD", cats=("background", "water"))   # 6x5, grid 4x4
    pred = predict_dataset(m, ds)
    x, _, box = pad_to_divisible(ds.images, ds.labels, 4, 4)
    spec = output_spec(m, ds)
    spec.out_size = x.shape[-2:]
    manual = crop(classify(m.predict(x, ds.manifest.meta(), spec)), box)
    np.testing.assert_array_equal(pred, manual)
