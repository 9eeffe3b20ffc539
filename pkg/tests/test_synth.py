from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arcdet.synth import (BASE_CLASSES, IMAGE_SIZE, TASK_CLASSES, Dataset, build_splits, dump, generate,
                          render_scene, split_indices)

scene_args = st.tuples(st.integers(0, 2**31), st.integers(0, 10_000), st.sampled_from(["base", "task", "mixed"]))


def mask_box(mask):
    rows, cols = np.nonzero(mask)
    return cols.min(), rows.min(), cols.max() + 1, rows.max() + 1


@settings(max_examples=60, deadline=None)
@given(scene_args)
def test_boxes_are_tight_to_masks_and_mostly_foreground(args):
    scene = render_scene(*args, with_masks=True)
    assert 1 <= len(scene.gts) <= 4
    for g, mask in zip(scene.gts, scene.masks):
        b = g.box
        mx1, my1, mx2, my2 = mask_box(mask)
        assert max(abs(mx1 - b.x1), abs(my1 - b.y1), abs(mx2 - b.x2), abs(my2 - b.y2)) <= 1
        inside = mask[int(b.y1):int(b.y2), int(b.x1):int(b.x2)].sum()
        assert inside / b.area >= 0.6
        assert min(b.x2 - b.x1, b.y2 - b.y1) >= 6
        assert b.x1 >= 2 and b.y1 >= 2 and b.x2 <= IMAGE_SIZE - 2 and b.y2 <= IMAGE_SIZE - 2


@settings(max_examples=20, deadline=None)
@given(scene_args)
def test_scene_is_pure_function_of_seed_and_index(args):
    a, b = render_scene(*args), render_scene(*args)
    assert np.array_equal(a.image, b.image) and a.gts == b.gts
    assert a.image.shape == (3, IMAGE_SIZE, IMAGE_SIZE)
    assert np.array_equal(a.image[0], a.image[2])


def test_mix_contract():
    base = generate(3, 100, "base")
    assert not any(g.class_id in TASK_CLASSES for s in base for g in s.gts)
    task = generate(3, 100, "task")
    assert all(g.class_id in TASK_CLASSES for s in task for g in s.gts)
    for s in generate(3, 50, "mixed"):
        classes = {g.class_id for g in s.gts}
        assert classes & set(BASE_CLASSES) and classes & set(TASK_CLASSES)


def test_base_class_balance():
    counts = Counter(g.class_id for s in generate(0, 1000, "base") for g in s.gts)
    total = sum(counts.values())
    for c in BASE_CLASSES:
        assert abs(counts[c] / total - 1 / 3) <= 0.1 / 3


def test_generate_validation():
    with pytest.raises(ValueError):
        generate(0, 0, "base")
    with pytest.raises(ValueError):
        render_scene(0, 0, "other")


def test_split_partition():
    parts = split_indices(1000, 5)
    assert [len(parts[k]) for k in ("train", "test", "val")] == [800, 100, 100]
    joined = np.concatenate(list(parts.values()))
    assert sorted(joined.tolist()) == list(range(1000))


def test_build_splits_and_concat():
    splits = build_splits(2, 20, "task")
    assert len(splits["train"]) == 16
    both = splits["train"].concat(splits["test"])
    assert len(both) == 18
    assert len(set(both.image_ids)) == 18
    assert all(g.image_id == i for i, scene in zip(both.image_ids, both.gts) for g in scene)
    assert len(both.all_gts()) == len(splits["train"].all_gts()) + len(splits["test"].all_gts())


def test_dataset_subset_keeps_ids():
    ds = Dataset.from_scenes(generate(1, 6, "base"))
    sub = ds.subset([4, 1])
    assert sub.image_ids == [4, 1] and sub.images.shape == (2, 3, 64, 64)


def test_dump_writes_pgm_and_labels(tmp_path):
    scenes = generate(0, 3, "mixed")
    dump(scenes, tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.pgm")) == ["000000.pgm", "000001.pgm", "000002.pgm"]
    assert (tmp_path / "000000.pgm").read_bytes().startswith(b"P5\n64 64\n255\n")
    labels = (tmp_path / "labels.tsv").read_text().splitlines()
    assert len(labels) == sum(len(s.gts) for s in scenes)
