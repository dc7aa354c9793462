import json
import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpfs3d.synthdata import (BACKGROUND, NOISE_SIGMA, Box3D, CategorySpec, ConfigurationError, DatasetSplit,
                              PointCloudScene, SceneFormatError, default_categories, generate_benchmark,
                              generate_scene, load_scene, load_split, read_benchmark, save_scene, save_split,
                              scene_to_text, write_benchmark)


def _check_scene_invariants(scene):
    assert len(scene.points) >= 1024
    ids = {b.instance_id for b in scene.boxes}
    assert set(np.unique(scene.point_instance).tolist()) - {BACKGROUND} <= ids
    keys = [(b.class_id, b.instance_id) for b in scene.boxes]
    assert len(keys) == len(set(keys))
    assert all((b.size > 0).all() for b in scene.boxes)


def _surface_excess(scene):
    """Per object point: how far it lies outside its owning box (0 inside)."""
    out = []
    for b in scene.boxes:
        pts = scene.points[scene.point_instance == b.instance_id]
        gap = np.maximum(b.lo - pts, 0) + np.maximum(pts - b.hi, 0)
        out.append(np.linalg.norm(gap, axis=1))
    return np.concatenate(out)


def test_single_cuboid_containment():
    crate = default_categories(1)
    scene = generate_scene(crate, 1, 7)
    assert len(scene.boxes) == 1
    _check_scene_invariants(scene)
    assert (_surface_excess(scene) <= 4 * NOISE_SIGMA).mean() >= 0.999


def test_scene_determinism_bytewise():
    cats = default_categories(12)
    assert scene_to_text(generate_scene(cats, (4, 8), 11)) == scene_to_text(generate_scene(cats, (4, 8), 11))
    assert scene_to_text(generate_scene(cats, (4, 8), 11)) != scene_to_text(generate_scene(cats, (4, 8), 12))


def test_scene_counts_via_reparse(tmp_path):
    cats = default_categories(12, points_per_object=(120, 200))
    path = os.path.join(tmp_path, "s.scene.json")
    save_scene(generate_scene(cats, (4, 8), 3), path)
    with open(path) as f:
        doc = json.load(f)
    assert 4 <= len(doc["boxes"]) <= 8
    counts = Counter(doc["point_instance"])
    for box in doc["boxes"]:
        assert 120 <= counts[box["instance_id"]] <= 200
        assert box["heading"] == 0.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_generated_scene_invariants(seed):
    scene = generate_scene(default_categories(12), (4, 8), seed)
    _check_scene_invariants(scene)
    excess = _surface_excess(scene)
    assert (excess > 4 * NOISE_SIGMA).mean() <= 0.001
    bg = scene.point_instance == BACKGROUND
    assert 0.25 <= bg.mean() <= 0.55


def test_sizes_respect_ranges():
    cats = default_categories(12)
    for seed in range(10):
        for b in generate_scene(cats, (4, 8), seed).boxes:
            sr = np.asarray(cats[b.class_id].size_range)
            assert np.all(b.size >= sr[:, 0] - 1e-6) and np.all(b.size <= sr[:, 1] + 1e-6)


def test_degenerate_spec_rejected():
    good = default_categories(1)[0]
    bad = CategorySpec(0, "flat", good.shape_program, ((0.2, 0.3), (0.2, 0.3), (0.0, 0.0)))
    with pytest.raises(ConfigurationError):
        generate_scene([bad], 1, 0)
    with pytest.raises(ConfigurationError):
        generate_scene([], 1, 0)


def test_round_trip(tmp_path):
    scene = generate_scene(default_categories(12), (4, 8), 5)
    path = os.path.join(tmp_path, "a.scene.json")
    save_scene(scene, path)
    again = load_scene(path)
    assert again == scene
    save_scene(again, path + "2")
    assert open(path).read() == open(path + "2").read()


def test_negative_size_rejected(tmp_path):
    scene = generate_scene(default_categories(2), 1, 0)
    doc = json.loads(scene_to_text(scene))
    doc["boxes"][0]["size"][1] = -0.5
    path = os.path.join(tmp_path, "neg.scene.json")
    with open(path, "w") as f:
        json.dump(doc, f)
    with pytest.raises(SceneFormatError, match="size"):
        load_scene(path)


def test_truncated_file_is_parse_error(tmp_path):
    text = scene_to_text(generate_scene(default_categories(2), 1, 0))
    path = os.path.join(tmp_path, "cut.scene.json")
    with open(path, "w") as f:
        f.write(text[: len(text) // 2])
    with pytest.raises(SceneFormatError):
        load_scene(path)


def test_missing_field_named(tmp_path):
    doc = json.loads(scene_to_text(generate_scene(default_categories(2), 1, 0)))
    del doc["point_instance"]
    path = os.path.join(tmp_path, "m.scene.json")
    with open(path, "w") as f:
        json.dump(doc, f)
    with pytest.raises(SceneFormatError, match="point_instance"):
        load_scene(path)


def test_box_invariants():
    with pytest.raises(SceneFormatError):
        Box3D([0, 0, 0], [1, 0, 1], 0, 0)
    b = Box3D([0, 0, 0], [1, 1, 1], 0, 0)
    with pytest.raises(SceneFormatError):
        PointCloudScene(np.zeros((1, 3)), [b, Box3D([1, 1, 1], [1, 1, 1], 0, 0)], [0], "dup")
    with pytest.raises(SceneFormatError):
        PointCloudScene(np.zeros((1, 3)), [b], [3], "orphan")


def test_split_disjoint_and_round_trip(tmp_path):
    with pytest.raises(ConfigurationError):
        DatasetSplit([0, 1], [1], 1)
    split = DatasetSplit([0, 1], [2], 1, [("s", 3)])
    save_split(split, os.path.join(tmp_path, "split.json"))
    assert load_split(os.path.join(tmp_path, "split.json")) == split


@pytest.fixture(scope="module")
def default_bench():
    return generate_benchmark(8, 4, 200, 50, 5, 1)


def test_default_benchmark_split(default_bench):
    split = default_bench.split
    assert len(split.base_class_ids) == 8 and len(split.novel_class_ids) == 4
    assert not set(split.base_class_ids) & set(split.novel_class_ids)
    assert len(split.annotated_novel_instances) == 20
    assert len(default_bench.train) == 200 and len(default_bench.test) == 50


def test_default_benchmark_train_annotations(default_bench):
    split = default_bench.split
    shots = set(split.annotated_novel_instances)
    per_class = Counter()
    for sc in default_bench.train:
        for b in sc.boxes:
            if b.class_id in split.novel_class_ids:
                assert (sc.scene_id, b.instance_id) in shots
                per_class[b.class_id] += 1
    assert all(per_class[c] == 5 for c in split.novel_class_ids)
    test_novel = sum(b.class_id in split.novel_class_ids for sc in default_bench.test for b in sc.boxes)
    assert test_novel > 0


@pytest.mark.parametrize("mode", ["absent", "background"])
def test_k1_split(mode):
    bench = generate_benchmark(4, 2, 20, 2, 1, 3, unlabeled_novel=mode)
    cls = Counter(b.class_id for sc in bench.train for b in sc.boxes if b.class_id in bench.split.novel_class_ids)
    assert all(cls[c] == 1 for c in bench.split.novel_class_ids)
    assert len(bench.split.annotated_novel_instances) == 2


def test_benchmark_infeasible():
    with pytest.raises(ConfigurationError):
        generate_benchmark(1, 1, 2, 1, 1, 0)
    with pytest.raises(ConfigurationError):
        generate_benchmark(2, 2, 1, 1, 10, 0, objects_per_scene=(1, 1))


def test_benchmark_write_read_bytewise(tmp_path):
    a, b = os.path.join(tmp_path, "a"), os.path.join(tmp_path, "b")
    write_benchmark(generate_benchmark(4, 2, 6, 2, 1, 9), a)
    write_benchmark(generate_benchmark(4, 2, 6, 2, 1, 9), b)
    for root, _, files in os.walk(a):
        for name in files:
            p = os.path.join(root, name)
            assert open(p, "rb").read() == open(p.replace(a, b, 1), "rb").read()
    bench = read_benchmark(a)
    assert len(bench.train) == 6 and len(bench.test) == 2
    assert len(os.listdir(os.path.join(a, "train"))) == 6
