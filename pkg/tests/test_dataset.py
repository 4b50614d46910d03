import os

import pytest
from hypothesis import given
from hypothesis import strategies as st

from aeropose.dataset import (
    AnnRecord,
    Dataset,
    DatasetParseError,
    DatasetValidationError,
    ImageRecord,
    dataset_stats,
    dumps_dataset,
    filter_person_classes,
    load_dataset,
    merge_datasets,
    merge_with_id_map,
    normalized,
    save_dataset,
)
from aeropose.geometry import Box, ContractError
from aeropose.synthetic import make_dataset

DATA = os.path.join(os.path.dirname(__file__), "data")


def fixture(name, split="val"):
    return load_dataset(os.path.join(DATA, name), split)


def test_load_counts():
    d = fixture("part_b.json")
    assert (len(d.images), len(d.annotations), len(d.categories)) == (2, 2, 1)
    assert d.annotations[0].keypoints.num_visible == 17
    assert d.annotations[1].iscrowd
    assert d.images[1].modality == "thermal"
    assert d.images[0].source_dataset == "part_b"


def test_dangling_reference_names_id():
    with pytest.raises(DatasetValidationError) as e:
        fixture("dangling.json")
    assert e.value.ids == [99]
    assert "99" in str(e.value)


def test_malformed_reports_location():
    with pytest.raises(DatasetParseError) as e:
        fixture("malformed.json")
    assert e.value.line == 3
    assert "line 3" in str(e.value)


@pytest.mark.parametrize(
    "mutate, ids",
    [
        (lambda doc: doc["images"].append(dict(doc["images"][0])), [1]),
        (lambda doc: doc["images"][0].update(width=0), [1]),
        (lambda doc: doc["annotations"][0].update(category_id=5), [5]),
        (lambda doc: doc["annotations"][0].update(num_keypoints=3), [1]),
    ],
)
def test_validation_errors(tmp_path, mutate, ids):
    import json

    doc = json.load(open(os.path.join(DATA, "part_b.json")))
    mutate(doc)
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(DatasetValidationError) as e:
        load_dataset(p)
    assert e.value.ids == ids


def test_filter_person_classes():
    d = fixture("part_a.json")
    f = filter_person_classes(d, ["pedestrian", "person"])
    assert f.categories == ((1, "person"),)
    assert [a.id for a in f.annotations] == [1, 3, 4]
    assert all(a.category_id == 1 for a in f.annotations)
    assert len(f.images) == 3  # image 3 kept with no annotations
    none = filter_person_classes(d, ["bicycle"])
    assert len(none.annotations) == 0 and len(none.images) == 3
    with pytest.raises(ContractError):
        filter_person_classes(d, [])


def test_filter_identity_on_single_class():
    d = fixture("part_b.json")
    assert filter_person_classes(d, ["person"]) == d


@pytest.mark.parametrize("keep", [["pedestrian"], ["person"], ["car"], ["pedestrian", "person"], ["x"]])
def test_filter_idempotent(keep):
    d = fixture("part_a.json")
    once = filter_person_classes(d, keep)
    assert filter_person_classes(once, keep) == once


def test_merge_counts_and_collisions():
    a = filter_person_classes(fixture("part_a.json"), ["pedestrian", "person"])
    b = fixture("part_b.json")
    m, idmap = merge_with_id_map([a, b])
    assert (len(m.images), len(m.annotations)) == (5, 5)
    assert [im.id for im in m.images] == [1, 2, 3, 4, 5]
    # raw image id 1 exists in both parts; oracle: rejoin via file name and compare boxes
    orig = {}
    for part in (a, b):
        idx = part.image_index()
        for ann in part.annotations:
            orig.setdefault(idx[ann.image_id].file_name, []).append(ann.bbox)
    midx = m.image_index()
    rejoined = {}
    for ann in m.annotations:
        rejoined.setdefault(midx[ann.image_id].file_name, []).append(ann.bbox)
    assert rejoined == orig
    assert {im.source_dataset for im in m.images} == {"part_a", "part_b"}
    assert idmap.images[3] == {"part": 1, "source": "part_b", "old_id": 1, "new_id": 4}


def test_merge_with_itself_duplicates():
    b = fixture("part_b.json")
    m = merge_datasets([b, b])
    assert len(m.images) == 4 and len(m.annotations) == 4
    assert len({im.id for im in m.images}) == 4


def test_merge_contract_errors():
    b = fixture("part_b.json")
    with pytest.raises(ContractError):
        merge_datasets([b, fixture("part_b.json", split="train")])
    with pytest.raises(ContractError):
        merge_datasets([fixture("part_a.json")])
    with pytest.raises(ContractError):
        merge_datasets([])


@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 3), st.integers(0, 10_000)), min_size=1, max_size=5))
def test_merge_conservation(specs):
    parts = [
        filter_person_classes(make_dataset(n, seed=s, max_persons=k, extra_classes=("car",)), ["person"])
        for n, k, s in specs
    ]
    m = merge_datasets(parts)
    assert len(m.images) == sum(len(p.images) for p in parts)
    assert len(m.annotations) == sum(len(p.annotations) for p in parts)
    ids = {im.id for im in m.images}
    assert all(a.image_id in ids for a in m.annotations)


def test_stats():
    empty = dataset_stats(Dataset())
    assert empty["images"] == 0 and empty["annotations"] == 0
    assert set(empty["area_histogram"].values()) == {0}
    one = Dataset(
        [ImageRecord(1, "a.png", 10, 10)],
        [AnnRecord(1, 1, 1, Box(0, 0, 10, 10), 100.0)],
        [(1, "person")],
    )
    s = dataset_stats(one)
    assert s["area_histogram"] == {"small": 1, "medium": 0, "large": 0}
    a = dataset_stats(fixture("part_a.json"))
    # oracle: direct comparisons against 32^2 and 96^2
    expected = {"small": 0, "medium": 0, "large": 0}
    for ar in (72, 800, 4000, 18000, 900):
        expected["small" if ar < 1024 else "medium" if ar < 9216 else "large"] += 1
    assert a["area_histogram"] == expected
    b = dataset_stats(fixture("part_b.json"))
    assert b["visibility_histogram"] == {"0": 0, "1": 4, "2": 13}


def test_round_trip(tmp_path):
    for name in ("part_a.json", "part_b.json"):
        d = fixture(name)
        p = tmp_path / name
        save_dataset(d, p)
        again = load_dataset(p)
        assert normalized(again) == normalized(d)
        assert dumps_dataset(again) == dumps_dataset(d)


@given(st.integers(0, 5000), st.integers(0, 8))
def test_round_trip_synthetic(seed, n):
    import tempfile

    d = make_dataset(n, seed=seed, extra_classes=("car", "bike"))
    with tempfile.TemporaryDirectory() as tmp:
        p = os.path.join(tmp, "d.json")
        save_dataset(d, p)
        again = load_dataset(p, d.split)
    assert normalized(again) == normalized(d)
