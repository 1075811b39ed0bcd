import csv

import numpy as np
import pytest
from PIL import Image

from killchain.data import (
    GTSRB_COLUMNS,
    BoundingBox,
    IngestionError,
    LabeledDataset,
    load_dataset,
    load_gtsrb,
    make_synthetic_pd_dataset,
    make_toy2d_dataset,
    save_dataset,
    toy2d_grid,
    train_test_split,
    validate_batch,
    validate_image,
)
from killchain.signs import sign_family, write_synthetic_gtsrb


def _write_class(root, class_id, rows, size=(20, 24), color=(200, 30, 30), header=GTSRB_COLUMNS):
    cdir = root / f"{class_id:05d}"
    cdir.mkdir(parents=True)
    for r in rows:
        if len(r) == 8:
            Image.new("RGB", size, color).save(cdir / r[0])
    with open(cdir / f"GT-{class_id:05d}.csv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter=";")
        w.writerow(header)
        w.writerows(rows)
    return cdir


def _row(name, cid, roi=(2, 3, 15, 18), size=(20, 24)):
    return [name, size[0], size[1], *roi, cid]


def test_image_invariants():
    validate_image(np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        validate_image(np.full((4, 4, 3), 1.01))
    with pytest.raises(ValueError):
        validate_image(np.zeros((4, 4, 5)))
    with pytest.raises(ValueError):
        validate_batch(np.zeros((2, 4, 4, 3)), shape=(5, 5, 3))


def test_bounding_box_invariants():
    assert BoundingBox(0.1, 0.2, 0.5, 0.6).area == pytest.approx(0.16)
    for bad in [(0.5, 0.1, 0.5, 0.2), (0.1, 0.1, 1.2, 0.2), (-0.1, 0, 0.5, 0.5)]:
        with pytest.raises(ValueError):
            BoundingBox(*bad)


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 2, 2, 3)), [0, 3], "classification", num_classes=3)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((1, 2, 2, 3)), [[0.5, 0.5, 0.2, 0.9]], "localization")
    ds = LabeledDataset(np.zeros((2, 2, 2, 3)), [0, 1], "classification", num_classes=2)
    assert not ds.images.flags.writeable


def test_split_keeps_groups_together():
    groups = np.repeat(np.arange(10), 5)
    ds = LabeledDataset(np.zeros((50, 2, 2, 3)), groups % 3, "classification", num_classes=3, groups=groups)
    tr, te = train_test_split(ds, 0.2, seed=0)
    assert len(tr) + len(te) == 50
    assert set(tr.groups.tolist()).isdisjoint(te.groups.tolist())
    assert len(set(te.groups.tolist())) == 2
    tr2, te2 = train_test_split(ds, 0.2, seed=0)
    assert np.array_equal(te.groups, te2.groups)


def test_load_gtsrb_crops_roi_and_remaps(tmp_path):
    _write_class(tmp_path, 3, [_row("00000_00000.ppm", 3), _row("00001_00000.ppm", 3)])
    _write_class(tmp_path, 7, [_row("00000_00000.ppm", 7)], color=(10, 10, 240))
    ds = load_gtsrb(tmp_path, class_subset=[7, 3], image_size=(16, 16))
    assert ds.images.shape == (3, 16, 16, 3)
    assert ds.num_classes == 2
    assert sorted(ds.labels.tolist()) == [0, 1, 1]
    blue = ds.images[ds.labels == 0][0]
    assert blue[..., 2].mean() == pytest.approx(240 / 255, abs=1e-3)
    assert len(set(ds.groups.tolist())) == 3
    full = load_gtsrb(tmp_path)
    assert full.num_classes == 43 and sorted(set(full.labels.tolist())) == [3, 7]


def test_load_gtsrb_roi_is_inclusive(tmp_path):
    cdir = tmp_path / "00000"
    cdir.mkdir()
    arr = np.zeros((10, 10, 3), np.uint8)
    arr[2:5, 3:7] = 255  # rows 2..4, cols 3..6
    Image.fromarray(arr).save(cdir / "00000_00000.ppm")
    with open(cdir / "GT-00000.csv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter=";")
        w.writerow(GTSRB_COLUMNS)
        w.writerow(["00000_00000.ppm", 10, 10, 3, 2, 6, 4, 0])
    ds = load_gtsrb(tmp_path, [0], image_size=(3, 4))
    assert ds.images.min() == pytest.approx(1.0)


def test_load_gtsrb_accepts_official_nesting(tmp_path):
    _write_class(tmp_path / "GTSRB" / "Final_Training" / "Images", 1, [_row("00000_00000.ppm", 1)])
    assert len(load_gtsrb(tmp_path, [1])) == 1


@pytest.mark.parametrize("case,match", [
    ("header", "unexpected header"),
    ("fields", "malformed row 3"),
    ("number", "malformed row 2"),
    ("classid", "ClassId"),
    ("missing_image", "cannot read image"),
    ("missing_class", "missing class directory"),
    ("empty_roi", "empty ROI"),
])
def test_load_gtsrb_errors(tmp_path, case, match):
    rows = [_row("00000_00000.ppm", 2), _row("00001_00000.ppm", 2)]
    header = GTSRB_COLUMNS
    if case == "header":
        header = GTSRB_COLUMNS[:-1] + ["Class"]
    elif case == "fields":
        rows[1] = rows[1][:6]
    elif case == "number":
        rows[0] = rows[0][:3] + ["x"] + rows[0][4:]
    elif case == "classid":
        rows[0][-1] = 5
    elif case == "empty_roi":
        rows[0] = _row("00000_00000.ppm", 2, roi=(10, 3, 5, 18))
    cdir = _write_class(tmp_path, 2, rows, header=header)
    if case == "missing_image":
        (cdir / "00001_00000.ppm").unlink()
    subset = [2, 9] if case == "missing_class" else [2]
    with pytest.raises(IngestionError, match=match):
        load_gtsrb(tmp_path, subset)


def test_load_gtsrb_missing_root(tmp_path):
    with pytest.raises(IngestionError):
        load_gtsrb(tmp_path / "nope")
    with pytest.raises(IngestionError, match="no GTSRB class directories"):
        load_gtsrb(tmp_path)


def test_synthetic_gtsrb_round_trip(tmp_path):
    write_synthetic_gtsrb(tmp_path, [1, 14, 25], tracks_per_class=2, frames_per_track=3, seed=0)
    ds = load_gtsrb(tmp_path, [1, 14, 25])
    assert ds.images.shape == (18, 32, 32, 3)
    assert np.bincount(ds.labels).tolist() == [6, 6, 6]
    assert len(set(ds.groups.tolist())) == 6
    assert sign_family(14) == "stop" and sign_family(1) == "speed"


def test_pd_dataset_boxes_match_pixels():
    ds = make_synthetic_pd_dataset(20, (32, 32), seed=5)
    for img, box in zip(ds.images, ds.labels):
        x0, y0, x1, y1 = np.round(box * 32).astype(int)
        inside = img[y0:y1, x0:x1]
        assert np.ptp(inside.reshape(-1, 3), axis=0).max() < 1e-6  # solid rectangle
        assert 0.02 * 0.8 <= (x1 - x0) * (y1 - y0) / 1024 <= 0.15 * 1.2
        assert (y1 - y0) > (x1 - x0)
    assert np.array_equal(ds.images, make_synthetic_pd_dataset(20, (32, 32), seed=5).images)


def test_toy2d_and_grid():
    ds = make_toy2d_dataset(300, seed=1)
    assert ds.images.shape == (300, 1, 1, 2) and ds.num_classes == 3
    g = toy2d_grid(200)
    assert g.shape == (40000, 1, 1, 2)
    assert g.min() > 0 and g.max() < 1


def test_dataset_png_round_trip(tmp_path):
    ds = make_toy2d_dataset(5, seed=2)
    back = load_dataset(save_dataset(ds, tmp_path / "d"))
    assert np.array_equal(back.labels, ds.labels)
    assert np.abs(back.images - ds.images).max() <= 0.5 / 255 + 1e-6
