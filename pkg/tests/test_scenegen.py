"""
Tests for the synthetic scene generator:
- Determinism under a fixed seed and shape contracts
- Static scenes produce zero motion and no events
- Faster motion produces more events
- Dataset layout, per-sample seeds and split sizes
- Optical flow agrees with projected scene flow; a translating plane has constant flow
"""
import numpy as np
import pytest

from rpeflow import storage
from rpeflow.errors import ConfigError
from rpeflow.geometry import project
from rpeflow.scenegen import (
    PlanePatch,
    RigidMotion,
    Scene,
    SceneSpec,
    Texture,
    generate,
    make_dataset,
    render_sample,
    sample_seed,
    split_counts,
)


def spec(**kw):
    base = dict(seed=5, width=16, height=16, num_points=48, substeps=4)
    base.update(kw)
    return SceneSpec(**base)


def test_generation_is_deterministic():
    a, b = generate(spec()), generate(spec())
    np.testing.assert_array_equal(a.rgb0, b.rgb0)
    np.testing.assert_array_equal(a.pc0, b.pc0)
    np.testing.assert_array_equal(a.events.events, b.events.events)
    assert a.meta == b.meta


def test_sample_shapes():
    s = generate(spec())
    assert s.rgb0.shape == (16, 16)
    assert s.flow.shape == (16, 16, 2)
    assert s.pc0.shape == (48, 3) and s.pc1.shape == (48, 3)
    assert s.sceneflow.shape == (48, 3)
    assert np.all(s.pc0[:, 2] > 0)
    assert s.rgb0.min() >= 0.0 and s.rgb0.max() <= 1.0
    assert set(s.meta) >= {"seed", "speed", "substeps", "threshold", "objects"}


def test_static_scene_has_no_motion():
    s = generate(spec(speed="static"))
    np.testing.assert_allclose(s.flow, 0.0, atol=1e-9)
    np.testing.assert_allclose(s.sceneflow, 0.0, atol=1e-9)
    assert len(s.events) == 0
    assert not s.occ3d.any()


def test_fast_scenes_emit_more_events_than_slow():
    seeds = range(4)
    fast = sum(len(generate(spec(seed=k, speed="fast")).events) for k in seeds)
    slow = sum(len(generate(spec(seed=k, speed="slow")).events) for k in seeds)
    assert fast >= slow


def test_sample_seeds_are_distinct_and_stable():
    seeds = [sample_seed(0, i) for i in range(20)]
    assert len(set(seeds)) == 20
    assert sample_seed(0, 3) == seeds[3]
    assert sample_seed(1, 3) != seeds[3]


@pytest.mark.parametrize("count,ratio,expected", [(4, 0.75, (3, 1)), (1, 0.75, (1, 0)), (5, 0.0, (0, 5))])
def test_split_counts(count, ratio, expected):
    assert split_counts(count, ratio) == expected


def test_split_counts_rejects_bad_values():
    with pytest.raises(ConfigError):
        split_counts(0, 0.5)
    with pytest.raises(ConfigError):
        split_counts(3, 1.5)


def test_make_dataset_layout(tmp_path):
    manifest = make_dataset(3, tmp_path, seed=2, train_ratio=0.67, template=spec())
    assert manifest["splits"] == {"train": ["sample_0000", "sample_0001"], "val": ["sample_0002"]}
    assert storage.read_manifest(tmp_path)["count"] == 3
    loaded = storage.read_sample(tmp_path / "sample_0002")
    direct = generate(spec(seed=sample_seed(2, 2)))
    np.testing.assert_array_equal(loaded.flow, direct.flow.astype(loaded.flow.dtype))


def test_flow_matches_projected_scene_flow():
    sample = generate(spec(seed=8, num_points=200))
    cam = sample.cam
    uv0 = project(sample.pc0, cam).values
    uv1 = project(sample.pc0 + sample.sceneflow, cam).values
    cols, rows = np.rint(uv0).astype(int).T
    visible = ~sample.occ3d
    assert visible.any()
    np.testing.assert_allclose(sample.flow[rows, cols][visible], (uv1 - uv0)[visible], atol=1e-6)


def test_translating_fronto_parallel_plane_has_constant_flow():
    s = spec(num_points=32)
    cam = s.camera()
    depth, tx = 4.0, 0.4
    plane = PlanePatch(np.array([0.0, 0.0, depth]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]),
                       2.5, 2.5, Texture.random(np.random.default_rng(0)),
                       RigidMotion(translation=np.array([tx, 0.0, 0.0])))
    scene = Scene([plane], Texture.random(np.random.default_rng(1)))
    sample = render_sample(scene, s, np.random.default_rng(2))
    np.testing.assert_allclose(sample.flow[..., 0], cam.f * tx / depth, atol=1e-9)
    np.testing.assert_allclose(sample.flow[..., 1], 0.0, atol=1e-9)
    np.testing.assert_allclose(sample.sceneflow, np.tile([tx, 0.0, 0.0], (32, 1)), atol=1e-12)
