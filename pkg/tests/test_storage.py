"""
Tests for on-disk formats:
- Raw arrays and size checks
- Event file header and record layout
- Sample directory round trip and manifests
- Checkpoint blob and dtype
- CSV training log, text tables and PPM images
"""
import json

import numpy as np
import pytest

from rpeflow import storage
from rpeflow.errors import ContractError, DataError
from rpeflow.eventkit import Event, EventStream
from rpeflow.scenegen import SceneSpec, generate


@pytest.fixture(scope="module")
def sample():
    return generate(SceneSpec(seed=11, width=16, height=16, num_points=32, substeps=4))


def test_array_size_is_checked(tmp_path):
    path = storage.write_array(tmp_path / "a.f32", np.arange(6.0).reshape(2, 3), "<f4")
    assert path.stat().st_size == 24
    np.testing.assert_array_equal(storage.read_array(path, "<f4", (2, 3)), np.arange(6.0).reshape(2, 3))
    with pytest.raises(DataError, match="24 bytes"):
        storage.read_array(path, "<f4", (3, 3))


def test_event_file_layout(tmp_path):
    stream = EventStream.from_events([Event(1, 2, 0.25, 1), Event(3, 0, 0.5, -1)], 5, 4)
    path = storage.write_events(tmp_path / "e.evt", stream)
    raw = path.read_bytes()
    assert len(raw) == 16 + 2 * 13
    assert raw[:4] == b"EVT1"
    assert int.from_bytes(raw[4:6], "little") == 5
    assert int.from_bytes(raw[6:8], "little") == 4
    back = storage.read_events(path)
    np.testing.assert_array_equal(back.events, stream.events)
    assert (back.width, back.height) == (5, 4)


def test_event_file_rejects_bad_magic_and_truncation(tmp_path):
    stream = EventStream.from_events([Event(1, 2, 0.25, 1)], 5, 4)
    path = storage.write_events(tmp_path / "e.evt", stream)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(DataError, match="truncated"):
        storage.read_events(path)
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(DataError, match="not an event file"):
        storage.read_events(path)


def test_sample_round_trip(tmp_path, sample):
    d = storage.write_sample(tmp_path / "s", sample)
    assert sorted(p.name for p in d.iterdir()) == sorted([
        "meta.json", "rgb0.f32", "rgb1.f32", "pc0.f32", "pc1.f32", "sf_gt.f32", "of_gt.f32",
        "occ2d.u8", "occ3d.u8", "valid.u8", "events.evt",
    ])
    back = storage.read_sample(d)
    np.testing.assert_array_equal(back.rgb0, sample.rgb0.astype(np.float32))
    np.testing.assert_array_equal(back.sceneflow, sample.sceneflow.astype(np.float32))
    np.testing.assert_array_equal(back.occ3d, sample.occ3d)
    np.testing.assert_array_equal(back.events.events, sample.events.events)
    assert back.cam == sample.cam
    assert back.meta == sample.meta


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError, match="no dataset manifest"):
        storage.read_manifest(tmp_path)
    storage.write_manifest(tmp_path, {"count": 0})
    with pytest.raises(DataError, match="no splits"):
        storage.read_manifest(tmp_path)
    storage.write_manifest(tmp_path, {"splits": {"train": [], "val": []}})
    with pytest.raises(DataError, match="empty"):
        storage.load_split(tmp_path, "train")
    with pytest.raises(DataError, match="no split"):
        storage.load_split(tmp_path, "test")


def test_checkpoint_round_trip(tmp_path):
    params = {"a.w": np.arange(6.0).reshape(2, 3), "a.b": np.array([0.5])}
    ckpt = storage.Checkpoint(params, {"m.a.w": np.ones((2, 3))}, {"levels": 2}, step=7, dtype="float64",
                              best_loss=0.1 + 0.2)
    d = storage.save_checkpoint(tmp_path / "ck", ckpt)
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["format"] == "rpeflow-checkpoint"
    assert [t["offset"] for t in manifest["tensors"]] == [0, 48, 56]
    back = storage.load_checkpoint(d)
    assert back.step == 7 and back.config == {"levels": 2}
    np.testing.assert_array_equal(back.params["a.w"], params["a.w"])
    assert back.params["a.w"].dtype == np.float64
    assert set(back.optimizer) == {"m.a.w"}
    assert back.best_loss == 0.1 + 0.2
    fresh = storage.save_checkpoint(tmp_path / "fresh", storage.Checkpoint({"w": np.zeros(2)}))
    assert storage.load_checkpoint(fresh).best_loss is None


def test_checkpoint_float32_blob_size(tmp_path):
    d = storage.save_checkpoint(tmp_path / "ck", storage.Checkpoint({"w": np.zeros((4, 4))}))
    assert (d / "weights.bin").stat().st_size == 64
    with pytest.raises(ContractError):
        storage.save_checkpoint(tmp_path / "bad", storage.Checkpoint({"w": np.zeros(1)}, dtype="float16"))


def test_truncated_checkpoint(tmp_path):
    d = storage.save_checkpoint(tmp_path / "ck", storage.Checkpoint({"w": np.zeros(8)}))
    (d / "weights.bin").write_bytes(bytes(8))
    with pytest.raises(DataError, match="truncated"):
        storage.load_checkpoint(d)


def test_train_log_append(tmp_path):
    path = tmp_path / "train_log.csv"
    with storage.TrainLog(path) as log:
        log.append(1, 2.5, 2.0, 50.0, 1.25)
    with storage.TrainLog(path, append=True) as log:
        log.append(2, 2.0, 1.5, 50.0, 1.0)
    assert path.read_text().splitlines()[0] == "iter,L,L_task,L_feat,EPE2D_train"
    rows = storage.read_train_log(path)
    assert [r["iter"] for r in rows] == [1.0, 2.0]
    assert rows[1]["L_task"] == 1.5


def test_format_table_aligns_columns():
    text = storage.format_table([{"name": "a", "v": 1.23456}, {"name": "long", "v": 10.0}], ["name", "v"], 2)
    lines = text.splitlines()
    assert lines[0] == "name      v"
    assert lines[2] == "   a   1.23"
    assert lines[3] == "long  10.00"


def test_ppm_round_trip(tmp_path):
    image = np.random.default_rng(0).integers(0, 256, (3, 5, 3), dtype=np.uint8)
    path = storage.write_ppm(tmp_path / "x.ppm", image)
    assert path.read_bytes().startswith(b"P6\n5 3\n255\n")
    np.testing.assert_array_equal(storage.read_ppm(path), image)
    with pytest.raises(DataError):
        storage.write_ppm(tmp_path / "y.ppm", image.astype(np.float32))
