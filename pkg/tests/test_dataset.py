import json

import numpy as np
import pytest

from ets.dataset import (
    BoxValidationError,
    CoarseLabelMap,
    CocoParseError,
    IntegrityError,
    apply_coarse_map,
    build_validation_set,
    distribution_report,
    load_episode,
    parse_coco,
    sample_kshot,
    save_episode,
)

from conftest import make_dataset


def coco_json(images, annotations, categories):
    return json.dumps({"images": images, "annotations": annotations,
                       "categories": categories})


def single_ann_dataset(counts: dict[int, int], width=100, height=100):
    """One annotation per image; counts gives instances per category."""
    spec = []
    next_id = 1
    for cid, n in counts.items():
        for _ in range(n):
            spec.append((next_id, width, height,
                         [(next_id, cid, 10, 10, 30, 30, 0)]))
            next_id += 1
    return make_dataset(spec, {cid: f"cat{cid}" for cid in counts})


class TestParseCoco:
    def test_minimal_file(self):
        ds = parse_coco(coco_json(
            [{"id": 1, "file_name": "a.png", "width": 10, "height": 10}],
            [],
            [{"id": 1, "name": "thing"}],
        ))
        assert len(ds.images) == 1
        assert len(ds.annotations) == 0
        assert ds.categories == {1: "thing"}

    def test_malformed_json_reports_byte_offset(self):
        with pytest.raises(CocoParseError) as exc:
            parse_coco(b'{"images": [,]}')
        assert exc.value.offset == 12

    def test_dangling_image_id(self):
        raw = coco_json(
            [{"id": 1, "file_name": "a.png", "width": 10, "height": 10}],
            [{"id": 5, "image_id": 99, "category_id": 1,
              "bbox": [0, 0, 5, 5], "iscrowd": 0}],
            [{"id": 1, "name": "thing"}],
        )
        with pytest.raises(IntegrityError, match="annotation 5 .*image_id 99"):
            parse_coco(raw)

    def test_dangling_category_id(self):
        raw = coco_json(
            [{"id": 1, "file_name": "a.png", "width": 10, "height": 10}],
            [{"id": 3, "image_id": 1, "category_id": 42,
              "bbox": [0, 0, 5, 5], "iscrowd": 0}],
            [{"id": 1, "name": "thing"}],
        )
        with pytest.raises(IntegrityError, match="annotation 3 .*category_id 42"):
            parse_coco(raw)

    def test_non_positive_box_rejected_or_dropped(self, caplog):
        raw = coco_json(
            [{"id": 1, "file_name": "a.png", "width": 10, "height": 10}],
            [{"id": 1, "image_id": 1, "category_id": 1,
              "bbox": [0, 0, 0, 5], "iscrowd": 0}],
            [{"id": 1, "name": "thing"}],
        )
        with pytest.raises(BoxValidationError, match="annotation 1"):
            parse_coco(raw)
        with caplog.at_level("WARNING"):
            ds = parse_coco(raw, lenient=True)
        assert len(ds.annotations) == 0
        assert "dropping annotation 1" in caplog.text

    def test_box_containment_half_pixel_slack(self):
        img = [{"id": 1, "file_name": "a.png", "width": 10, "height": 10}]
        cats = [{"id": 1, "name": "t"}]
        ok = coco_json(img, [{"id": 1, "image_id": 1, "category_id": 1,
                              "bbox": [5, 5, 5.4, 5.4], "iscrowd": 0}], cats)
        assert len(parse_coco(ok).annotations) == 1
        bad = coco_json(img, [{"id": 1, "image_id": 1, "category_id": 1,
                               "bbox": [5, 5, 6, 6], "iscrowd": 0}], cats)
        with pytest.raises(BoxValidationError):
            parse_coco(bad)

    def test_counts_match_independent_walk(self):
        # oracle: count category ids straight off the raw JSON records
        raw = coco_json(
            [{"id": i, "file_name": f"{i}.png", "width": 50, "height": 50}
             for i in (1, 2, 3)],
            [
                {"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 5, 5], "iscrowd": 0},
                {"id": 2, "image_id": 1, "category_id": 2, "bbox": [5, 5, 5, 5], "iscrowd": 0},
                {"id": 3, "image_id": 2, "category_id": 1, "bbox": [0, 0, 9, 9], "iscrowd": 0},
                {"id": 4, "image_id": 3, "category_id": 1, "bbox": [1, 1, 8, 8], "iscrowd": 0},
                {"id": 5, "image_id": 3, "category_id": 2, "bbox": [2, 2, 6, 6], "iscrowd": 0},
            ],
            [{"id": 1, "name": "a"}, {"id": 2, "name": "b"}],
        )
        expected = {}
        for rec in json.loads(raw)["annotations"]:
            expected[rec["category_id"]] = expected.get(rec["category_id"], 0) + 1
        ds = parse_coco(raw)
        assert ds.category_counts() == expected
        assert [a.id for a in ds.annotations] == [1, 2, 3, 4, 5]  # order preserved


class TestSampleKshot:
    def test_one_per_category(self):
        ds = single_ann_dataset({1: 10, 2: 10})
        ep = sample_kshot(ds, k=1, seed=3)
        assert len(ep.base.annotations) == 2
        cats = sorted(a.category_id for a in ep.base.annotations)
        assert cats == [1, 2]

    def test_clamps_to_available(self):
        ds = single_ann_dataset({1: 4})
        ep = sample_kshot(ds, k=10, seed=0)
        assert len(ep.base.annotations) == 4

    def test_deterministic_serialization(self):
        ds = single_ann_dataset({1: 12, 2: 7, 3: 9})
        a = sample_kshot(ds, k=5, seed=7)
        b = sample_kshot(ds, k=5, seed=7)
        assert a.base.canonical_bytes() == b.base.canonical_bytes()
        c = sample_kshot(ds, k=5, seed=8)
        assert c.base.canonical_bytes() != a.base.canonical_bytes()

    def test_ids_are_original(self):
        ds = single_ann_dataset({1: 6})
        ep = sample_kshot(ds, k=3, seed=1)
        original = {a.id for a in ds.annotations}
        assert {a.id for a in ep.base.annotations} <= original

    def test_monotone_in_k(self):
        ds = single_ann_dataset({1: 10, 2: 3, 3: 8})
        sizes = [len(sample_kshot(ds, k=k, seed=5).base.annotations)
                 for k in (1, 2, 3, 5, 8, 12)]
        assert sizes == sorted(sizes)

    def test_k_zero_rejected(self):
        ds = single_ann_dataset({1: 3})
        with pytest.raises(ValueError):
            sample_kshot(ds, k=0, seed=0)

    def test_empty_category_skipped_with_warning(self, caplog):
        ds = make_dataset([(1, 50, 50, [(1, 1, 0, 0, 10, 10, 0)])],
                          {1: "full", 2: "empty"})
        with caplog.at_level("WARNING"):
            ep = sample_kshot(ds, k=1, seed=0)
        assert len(ep.base.annotations) == 1
        assert "category 2" in caplog.text

    def test_multi_annotation_images_enter_once(self):
        ds = make_dataset(
            [(1, 100, 100, [(1, 1, 0, 0, 10, 10, 0), (2, 2, 20, 20, 10, 10, 0)])],
            {1: "a", 2: "b"},
        )
        ep = sample_kshot(ds, k=1, seed=0)
        assert len(ep.base.images) == 1
        assert len(ep.base.annotations) == 2


class TestBuildValidationSet:
    def test_full_rate_identity(self):
        ds = single_ann_dataset({1: 5, 2: 3})
        val = build_validation_set(ds, rate=1.0, seed=4)
        assert {im.id for im in val.images} == {im.id for im in ds.images}
        assert [a.id for a in val.annotations] == [a.id for a in ds.annotations]
        assert val.split_tag == "val"

    def test_exact_stratification(self):
        ds = single_ann_dataset({1: 10})
        val = build_validation_set(ds, rate=0.3, seed=9)
        assert len(val.annotations) == 3

    def test_stratification_within_one(self):
        ds = single_ann_dataset({1: 20, 2: 10, 3: 5})
        for seed in range(5):
            val = build_validation_set(ds, rate=0.5, seed=seed)
            counts = val.category_counts()
            for cid, n in {1: 20, 2: 10, 3: 5}.items():
                assert abs(counts[cid] - 0.5 * n) < 1.0

    def test_rate_out_of_range(self):
        ds = single_ann_dataset({1: 5})
        for rate in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError, match="rate"):
                build_validation_set(ds, rate=rate, seed=0)

    def test_tiny_rate_force_includes(self, caplog):
        ds = single_ann_dataset({1: 100, 2: 2})
        with caplog.at_level("WARNING"):
            val = build_validation_set(ds, rate=0.1, seed=0)
        counts = val.category_counts()
        assert counts[2] >= 1
        assert "force-including" in caplog.text

    def test_disjoint_partitions_image_ids(self):
        ds = single_ann_dataset({1: 9, 2: 6})
        val, rem = build_validation_set(ds, rate=0.4, seed=2, disjoint=True)
        val_ids = {im.id for im in val.images}
        rem_ids = {im.id for im in rem.images}
        assert val_ids & rem_ids == set()
        assert val_ids | rem_ids == {im.id for im in ds.images}
        assert rem.split_tag == "test"

    def test_coarse_relabeling(self):
        ds = single_ann_dataset({1: 4, 2: 4})
        coarse = CoarseLabelMap(entries={1: 10, 2: 10}, categories={10: "merged"})
        val = build_validation_set(ds, rate=1.0, coarse=coarse, seed=0)
        assert val.categories == {10: "merged"}
        assert all(a.category_id == 10 for a in val.annotations)

    def test_partial_coarse_map_rejected(self):
        ds = single_ann_dataset({1: 4, 2: 4})
        coarse = CoarseLabelMap(entries={1: 10}, categories={10: "merged"})
        with pytest.raises(IntegrityError, match="not total"):
            build_validation_set(ds, rate=0.5, coarse=coarse, seed=0)

    def test_residual_annotations_ride_along(self):
        # category 2 lives only on an image shared with category 1
        ds = make_dataset(
            [
                (1, 100, 100, [(1, 1, 0, 0, 10, 10, 0), (2, 2, 20, 20, 10, 10, 0)]),
                (2, 100, 100, [(3, 1, 0, 0, 10, 10, 0)]),
            ],
            {1: "a", 2: "b"},
        )
        val = build_validation_set(ds, rate=1.0, seed=0)
        assert len(val.annotations) == 3

    def test_determinism(self):
        ds = single_ann_dataset({1: 30, 2: 11, 3: 7})
        a = build_validation_set(ds, rate=0.5, seed=13)
        b = build_validation_set(ds, rate=0.5, seed=13)
        assert a.canonical_bytes() == b.canonical_bytes()


class TestDistributionReport:
    def test_identity(self):
        ds = single_ann_dataset({1: 4, 2: 4})
        report = distribution_report(ds, ds)
        assert report.max_abs_deviation == 0.0

    def test_proportional_scaling(self):
        val = single_ann_dataset({1: 1, 2: 1})
        ref = single_ann_dataset({1: 2, 2: 2})
        assert distribution_report(val, ref).max_abs_deviation == 0.0

    def test_hand_proportions(self):
        val = single_ann_dataset({1: 3, 2: 1})
        ref = single_ann_dataset({1: 5, 2: 5})
        report = distribution_report(val, ref)
        assert report.max_abs_deviation == pytest.approx(0.25, abs=1e-12)

    def test_disjoint_tables_rejected(self):
        a = single_ann_dataset({1: 2})
        b = single_ann_dataset({9: 2})
        with pytest.raises(ValueError, match="disjoint"):
            distribution_report(a, b)


class TestCoarseLabelMap:
    def test_parse_and_dump_round_trip(self):
        text = "1 10 vehicles\n2 10 vehicles\n3 20 animals\n"
        cmap = CoarseLabelMap.parse(text)
        assert cmap.entries == {1: 10, 2: 10, 3: 20}
        assert cmap.categories == {10: "vehicles", 20: "animals"}
        assert CoarseLabelMap.parse(cmap.dump()).entries == cmap.entries

    def test_name_with_spaces(self):
        cmap = CoarseLabelMap.parse("1 5 big cats\n")
        assert cmap.categories[5] == "big cats"

    def test_conflicting_names_rejected(self):
        with pytest.raises(IntegrityError):
            CoarseLabelMap.parse("1 5 cats\n2 5 dogs\n")

    def test_identity_map(self):
        cmap = CoarseLabelMap.identity({3: "x", 7: "y"})
        assert cmap.entries == {3: 3, 7: 7}

    def test_apply_coarse_map(self):
        ds = single_ann_dataset({1: 2, 2: 2})
        cmap = CoarseLabelMap(entries={1: 1, 2: 1}, categories={1: "all"})
        out = apply_coarse_map(ds, cmap)
        assert set(out.category_counts()) == {1}
        assert out.category_counts()[1] == 4


def test_episode_save_load_round_trip(tmp_path):
    ds = single_ann_dataset({1: 6, 2: 4})
    ep = sample_kshot(ds, k=2, seed=42)
    path = tmp_path / "episode.json"
    save_episode(ep, path)
    back = load_episode(path)
    assert back.k == 2
    assert back.seed == 42
    assert back.base.canonical_bytes() == ep.base.canonical_bytes()
