from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from conftest import make_record_pool
from pagepipe import dataset as ds
from pagepipe.model import read_manifest, write_manifest
from pagepipe.metrics import cer


class TestNoiseChannel:
    def test_zero_probability_is_identity(self):
        channel = ds.NoiseChannel(substitutions=(("in", "1n", 0.0),), seed=1)
        text = "going in and winning"
        assert ds.apply_noise(text, channel, "w0") == text

    def test_certain_substitution_hits_every_occurrence(self):
        channel = ds.NoiseChannel(substitutions=(("in", "1n", 1.0),), seed=1)
        noisy = ds.apply_noise("in the inn, going in", channel, "w0")
        assert noisy == "1n the 1nn, go1ng 1n"
        assert noisy.count("1n") == "in the inn, going in".count("in")

    def test_writer_function_is_stable_across_calls(self):
        channel = ds.NoiseChannel(substitutions=(("e", "c", 0.5),), seed=3)
        text = "repeated sentence with several e letters everywhere"
        first = ds.apply_noise(text, channel, "w7")
        assert all(ds.apply_noise(text, channel, "w7") == first for _ in range(5))

    def test_different_writers_noise_differently(self):
        channel = ds.NoiseChannel(substitutions=(("e", "c", 0.5),), seed=3)
        text = "repeated sentence with several e letters everywhere " * 3
        outputs = {ds.apply_noise(text, channel, f"w{i}") for i in range(8)}
        assert len(outputs) > 1

    def test_probabilities_validated(self):
        with pytest.raises(ValueError):
            ds.NoiseChannel(substitutions=(("a", "b", 1.5),))
        with pytest.raises(ValueError):
            ds.NoiseChannel(structural_faults=(("bogus_fault", 0.5),))

    def test_column_split_round_trip(self):
        text = "alpha beta gamma\ndelta epsilon zeta\nfirst second third"
        split = ds.column_split(text)
        assert len(split.split("\n")) == 6
        assert ds.invert_column_split(split) == text

    def test_column_split_fault_applied_at_p1(self):
        channel = ds.NoiseChannel(structural_faults=((ds.FAULT_COLUMN_SPLIT, 1.0),), seed=2)
        text = "one two three\nfour five six"
        noisy = ds.apply_noise(text, channel, "w0")
        assert ds.invert_column_split(noisy) == text


class TestCropPage:
    def _image(self, tmp_path, size=(60, 40)):
        path = tmp_path / "src.png"
        img = Image.new("RGB", size, (250, 250, 250))
        for x in range(size[0]):
            img.putpixel((x, size[1] // 2), (0, 0, 0))
        img.save(path)
        return path

    def test_full_bbox_is_pixel_identical(self, tmp_path):
        src = self._image(tmp_path)
        record = ds.SourcePageRecord("p1", "w0", str(src), (0, 0, 60, 40), "text")
        page = ds.crop_page(record, tmp_path / "out")
        cropped = Image.open(tmp_path / "out" / page.image_ref)
        assert cropped.tobytes() == Image.open(src).tobytes()
        assert page.ground_truth == "text"

    @pytest.mark.parametrize("height", [40, 41])
    def test_lower_half_bbox_floor_rule(self, tmp_path, height):
        src = self._image(tmp_path, size=(30, height))
        half = height // 2
        record = ds.SourcePageRecord("p2", "w0", str(src), (0, height - half, 30, half), "t")
        page = ds.crop_page(record, tmp_path / "out")
        cropped = Image.open(tmp_path / "out" / page.image_ref)
        assert cropped.size == (30, half)

    def test_zero_width_bbox_rejected(self, tmp_path):
        src = self._image(tmp_path)
        record = ds.SourcePageRecord("p3", "w0", str(src), (0, 0, 0, 40), "t")
        with pytest.raises(ds.DatasetBuildError, match="width/height"):
            ds.crop_page(record, tmp_path / "out")

    def test_oversized_bbox_clamped_with_warning(self, tmp_path):
        src = self._image(tmp_path)
        record = ds.SourcePageRecord("p4", "w0", str(src), (10, 10, 500, 500), "t")
        warnings = []
        page = ds.crop_page(record, tmp_path / "out", warnings=warnings)
        cropped = Image.open(tmp_path / "out" / page.image_ref)
        assert cropped.size == (50, 30)
        assert warnings and "clamped" in warnings[0]

    def test_undecodable_image_rejected(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image at all")
        record = ds.SourcePageRecord("p5", "w0", str(bad), (0, 0, 10, 10), "t")
        with pytest.raises(ds.DatasetBuildError, match="decode"):
            ds.crop_page(record, tmp_path / "out")


class TestMultipageBuilder:
    def test_paper_configuration_splits_210_58(self, tmp_path):
        records = make_record_pool(writers=33, pages_per_writer=18)  # 594 pages
        manifest = ds.build_iam_multipage(records, [2, 3], 268, seed=0, out_dir=tmp_path, crop=False)
        counts = Counter(d.page_count for d in manifest.documents)
        assert len(manifest.documents) == 268
        assert counts[2] == 210 and counts[3] == 58
        # the full-size manifest survives a disk round-trip structurally intact
        write_manifest(manifest, tmp_path / "manifest.jsonl")
        assert read_manifest(tmp_path / "manifest.jsonl") == manifest

    def test_exact_count_plan(self, tmp_path):
        records = make_record_pool(writers=33, pages_per_writer=18)
        manifest = ds.build_iam_multipage(
            records, {2: 210, 3: 58}, 268, seed=1, out_dir=tmp_path, crop=False
        )
        counts = Counter(d.page_count for d in manifest.documents)
        assert counts[2] == 210 and counts[3] == 58

    def test_writer_with_exactly_two_pages_yields_one_document(self, tmp_path):
        records = make_record_pool(writers=1, pages_per_writer=2)
        manifest = ds.build_iam_multipage(records, {2: 1}, 1, seed=0, out_dir=tmp_path, crop=False)
        assert len(manifest.documents) == 1
        assert manifest.documents[0].page_count == 2

    def test_same_seed_identical_different_seed_differs(self, tmp_path):
        records = make_record_pool(writers=20, pages_per_writer=10)
        def build(seed, sub):
            m = ds.build_iam_multipage(records, {2: 30, 3: 20}, 50, seed=seed,
                                       out_dir=tmp_path / sub, crop=False)
            return [(d.writer_id, [p.source_id for p in d.pages]) for d in m.documents]
        assert build(0, "a") == build(0, "b")
        assert build(0, "c") != build(1, "d")

    def test_documents_never_mix_writers(self, tmp_path):
        records = make_record_pool(writers=6, pages_per_writer=8)
        manifest = ds.build_iam_multipage(records, {2: 8, 3: 4}, 12, seed=2, out_dir=tmp_path, crop=False)
        for doc in manifest.documents:
            writers = {p.source_id.split("-")[0] for p in doc.pages}
            assert writers == {doc.writer_id}

    def test_no_page_reuse_across_dataset(self, tmp_path):
        records = make_record_pool(writers=6, pages_per_writer=8)
        manifest = ds.build_iam_multipage(records, {2: 10, 3: 4}, 14, seed=2, out_dir=tmp_path, crop=False)
        used = [p.source_id for d in manifest.documents for p in d.pages]
        assert len(used) == len(set(used))

    def test_small_writers_skipped_with_warning(self, tmp_path):
        records = make_record_pool(writers=4, pages_per_writer=6)
        records.append(
            ds.SourcePageRecord("lonely-0", "lonely", "img/x.png", (0, 0, 5, 5), "t")
        )
        manifest = ds.build_iam_multipage(records, {2: 6}, 6, seed=0, out_dir=tmp_path, crop=False)
        assert any("skipping writer lonely" in w for w in manifest.warnings)

    def test_zero_assemblable_documents_is_hard_error(self, tmp_path):
        records = make_record_pool(writers=1, pages_per_writer=1)
        with pytest.raises(ds.DatasetBuildError):
            ds.build_iam_multipage(records, {2: 1}, 1, seed=0, out_dir=tmp_path, crop=False)

    def test_unpackable_fullest_plan_relaxes_with_warning(self, tmp_path):
        # three writers x 4 pages: the pool-consuming split {2:3, 3:2} cannot
        # pack (a 4-page writer cannot absorb a pair of 3-page documents), so
        # one upgrade is shed and a page stays unused
        records = make_record_pool(writers=3, pages_per_writer=4)
        manifest = ds.build_multipage_dataset(records, [2, 3], 5, seed=0,
                                              out_dir=tmp_path, crop=False)
        counts = Counter(d.page_count for d in manifest.documents)
        assert len(manifest.documents) == 5
        assert counts[2] == 4 and counts[3] == 1
        assert any("relaxed" in w for w in manifest.warnings)

    def test_exact_count_plans_never_relax(self, tmp_path):
        records = make_record_pool(writers=3, pages_per_writer=4)
        with pytest.raises(ds.InsufficientPagesError):
            ds.build_multipage_dataset(records, {2: 3, 3: 2}, 5, seed=0,
                                       out_dir=tmp_path, crop=False)


class TestAssemblerProperties:
    @given(
        writer_sizes=st.lists(st.integers(min_value=2, max_value=12), min_size=2, max_size=8),
        target_fraction=st.floats(min_value=0.2, max_value=1.0),
        seed=st.integers(min_value=0, max_value=2**16),
    )
    @settings(max_examples=60, deadline=None)
    def test_any_successful_assembly_is_well_formed(self, writer_sizes, target_fraction, seed, tmp_path_factory):
        records = []
        for w, size in enumerate(writer_sizes):
            for p in range(size):
                records.append(
                    ds.SourcePageRecord(
                        source_id=f"w{w}-{p}", writer_id=f"w{w}", image_ref="x.png",
                        handwritten_bbox=(0, 0, 10, 10), ground_truth=f"t {w} {p}",
                    )
                )
        total = sum(writer_sizes)
        target = max(1, int(total // 2 * target_fraction))
        out = tmp_path_factory.mktemp("prop")
        try:
            manifest = ds.build_multipage_dataset(
                records, [2, 3], target, seed=seed, out_dir=out, crop=False
            )
        except ds.DatasetBuildError:
            return  # infeasible pools may refuse; only successful builds are checked
        assert len(manifest.documents) == target
        used = [p.source_id for d in manifest.documents for p in d.pages]
        assert len(used) == len(set(used))
        for doc in manifest.documents:
            assert doc.page_count in (2, 3)
            assert all(p.source_id.startswith(doc.writer_id + "-") for p in doc.pages)


class TestFixedLengthSeries:
    def test_ninety_documents(self, tmp_path):
        records = make_record_pool(writers=15, pages_per_writer=40)
        manifest = ds.build_fixed_length_series(records, range(2, 11), 10, seed=0,
                                                out_dir=tmp_path, crop=False)
        counts = Counter(d.page_count for d in manifest.documents)
        assert len(manifest.documents) == 90
        assert all(counts[n] == 10 for n in range(2, 11))

    def test_single_count_single_doc(self, tmp_path):
        records = make_record_pool(writers=2, pages_per_writer=4)
        manifest = ds.build_fixed_length_series(records, [2], 1, seed=0, out_dir=tmp_path, crop=False)
        assert len(manifest.documents) == 1 and manifest.documents[0].page_count == 2

    def test_pool_too_small_names_failing_count(self, tmp_path):
        records = make_record_pool(writers=4, pages_per_writer=5)  # no writer can host 10 pages
        with pytest.raises(ds.InsufficientPagesError) as info:
            ds.build_fixed_length_series(records, range(2, 11), 10, seed=0,
                                         out_dir=tmp_path, crop=False)
        assert info.value.page_count == 10


class TestSyntheticCorpus:
    def test_zero_noise_oracle_equals_ground_truth(self, tmp_path):
        manifest, oracle = ds.generate_synthetic_corpus(
            text_source=ds.make_text_source(0),
            writers=3,
            noise=ds.NoiseChannel(),
            seed=0,
            out_dir=tmp_path,
            target_docs=6,
        )
        for doc in manifest.documents:
            for page in doc.pages:
                assert oracle[page.source_id] == page.ground_truth
                assert cer(page.ground_truth, oracle[page.source_id]) == 0.0

    def test_substitution_counted_before_and_after(self, tmp_path):
        manifest, oracle = ds.generate_synthetic_corpus(
            text_source=["going in and in again", "the inn is in town"],
            writers=2,
            noise=ds.NoiseChannel(substitutions=(("in", "1n", 1.0),), seed=1),
            seed=1,
            out_dir=tmp_path,
            target_docs=2,
            page_counts={2: 2},
            lines_per_page=2,
        )
        for doc in manifest.documents:
            for page in doc.pages:
                expected = page.ground_truth.count("in")
                assert oracle[page.source_id].count("1n") == expected
                assert "in" not in oracle[page.source_id]

    def test_deterministic_given_seed(self, tmp_path):
        kwargs = dict(
            text_source=ds.make_text_source(4),
            writers=4,
            noise=ds.NoiseChannel(substitutions=(("e", "c", 0.3),), seed=4),
            seed=4,
            target_docs=8,
        )
        m1, o1 = ds.generate_synthetic_corpus(out_dir=tmp_path / "a", **kwargs)
        m2, o2 = ds.generate_synthetic_corpus(out_dir=tmp_path / "b", **kwargs)
        assert o1 == o2
        assert [(d.doc_id, [p.source_id for p in d.pages]) for d in m1.documents] == [
            (d.doc_id, [p.source_id for p in d.pages]) for d in m2.documents
        ]

    def test_placeholder_images_exist(self, tmp_path):
        manifest, _ = ds.generate_synthetic_corpus(
            text_source=ds.make_text_source(2),
            writers=2,
            noise=ds.NoiseChannel(),
            seed=2,
            out_dir=tmp_path,
            target_docs=4,
        )
        for doc in manifest.documents:
            for page in doc.pages:
                assert manifest.resolve_image(page).exists()

    def test_oracle_table_round_trip(self, tmp_path):
        _, oracle = ds.generate_synthetic_corpus(
            text_source=ds.make_text_source(2),
            writers=2,
            noise=ds.NoiseChannel(substitutions=(("a", "4", 0.5),), seed=2),
            seed=2,
            out_dir=tmp_path,
            target_docs=4,
        )
        path = tmp_path / "oracle.jsonl"
        ds.write_oracle_table(oracle, path)
        assert ds.read_oracle_table(path) == oracle

    def test_manifest_round_trips_through_disk(self, tmp_path):
        manifest, _ = ds.generate_synthetic_corpus(
            text_source=ds.make_text_source(3),
            writers=3,
            noise=ds.NoiseChannel(),
            seed=3,
            out_dir=tmp_path,
            target_docs=6,
        )
        write_manifest(manifest, tmp_path / "manifest.jsonl")
        loaded = read_manifest(tmp_path / "manifest.jsonl")
        assert loaded == manifest
        assert not loaded.warnings
