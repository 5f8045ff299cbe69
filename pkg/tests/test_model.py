import json

import pytest
from hypothesis import given, strategies as st

from pagepipe.model import (
    Document,
    GuardAction,
    Manifest,
    ManifestError,
    Page,
    PAGE_BREAK_MARKER,
    TranscriptionResult,
    Usage,
    join_pages,
    read_manifest,
    read_result,
    split_pages,
    split_pages_with_notes,
    write_manifest,
    write_result,
)


def _page(page_id=1, source_id="s1", text="hello\nworld"):
    return Page(page_id=page_id, image_ref=f"pages/{source_id}.png", ground_truth=text, source_id=source_id)


def _doc(doc_id="d1", n_pages=2):
    pages = tuple(_page(i + 1, f"{doc_id}-p{i}") for i in range(n_pages))
    return Document(doc_id=doc_id, writer_id="w1", pages=pages)


class TestMarkers:
    def test_join_single_page_has_no_marker(self):
        assert join_pages(["a"]) == "a"

    def test_join_two_pages(self):
        assert join_pages(["a", "b"]) == "a\n[NEW_PAGE]\nb"

    def test_join_empty_list_rejected(self):
        with pytest.raises(ValueError):
            join_pages([])

    def test_join_allows_empty_page_text(self):
        assert join_pages(["", "b"]) == "\n[NEW_PAGE]\nb"

    def test_split_canonical(self):
        assert split_pages("a\n[NEW_PAGE]\nb") == ["a", "b"]

    def test_split_no_marker(self):
        assert split_pages("a") == ["a"]

    def test_split_tolerates_missing_newlines_with_note(self):
        segments, notes = split_pages_with_notes("a[NEW_PAGE]b")
        assert segments == ["a", "b"]
        assert len(notes) == 1 and "missing surrounding newline" in notes[0]

    def test_split_canonical_has_no_notes(self):
        _, notes = split_pages_with_notes("a\n[NEW_PAGE]\nb")
        assert notes == []

    @given(
        st.lists(
            st.text(alphabet=st.characters(blacklist_characters="[", blacklist_categories=("Cs",)), max_size=40),
            min_size=1,
            max_size=6,
        )
    )
    def test_split_inverts_join_for_marker_free_texts(self, texts):
        assert split_pages(join_pages(texts)) == texts


class TestDocumentValidation:
    def test_valid_document(self):
        _doc().validate()

    def test_non_consecutive_page_ids(self):
        doc = Document(
            doc_id="bad",
            writer_id="w",
            pages=(_page(1, "a"), _page(3, "b")),
        )
        with pytest.raises(ManifestError, match="non-consecutive page_ids"):
            doc.validate()

    def test_empty_document_rejected(self):
        with pytest.raises(ManifestError, match="no pages"):
            Document(doc_id="empty", writer_id="w", pages=()).validate()

    def test_marker_token_in_ground_truth_rejected(self):
        page = Page(page_id=1, image_ref="p.png", ground_truth="a [NEW_PAGE] b", source_id="s")
        with pytest.raises(ManifestError, match="reserved page-break token"):
            page.validate()

    def test_marked_ground_truth(self):
        doc = _doc(n_pages=2)
        assert doc.marked_ground_truth().count(PAGE_BREAK_MARKER) == 1


class TestManifestIO:
    def test_empty_file_is_empty_manifest(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("", encoding="utf-8")
        manifest = read_manifest(path)
        assert manifest.documents == []

    def test_round_trip_single_document(self, tmp_path):
        manifest = Manifest(dataset_id="t", documents=[_doc()], seed=3)
        path = tmp_path / "m.jsonl"
        write_manifest(manifest, path)
        loaded = read_manifest(path)
        assert loaded == manifest

    def test_round_trip_zero_documents(self, tmp_path):
        manifest = Manifest(dataset_id="t", documents=[], seed=0)
        path = tmp_path / "m.jsonl"
        write_manifest(manifest, path)
        assert read_manifest(path) == manifest

    def test_unicode_and_newlines_preserved(self, tmp_path):
        # fixed fuzz corpus: control-ish whitespace, combining marks, emoji, quotes
        nasty = [
            "héllo wörld\nsecond line",
            "tabs\tand  spaces\n\ntrailing\n",
            "quotes \"and\" 'apostrophes' — dash… ellipsis",
            "emoji 🖋️ and CJK 手書き文字",
            "combining á and ñ",
        ]
        pages = tuple(
            Page(page_id=i + 1, image_ref=f"p{i}.png", ground_truth=text, source_id=f"s{i}")
            for i, text in enumerate(nasty)
        )
        manifest = Manifest(
            dataset_id="fuzz", documents=[Document("d1", "w1", pages)], seed=1
        )
        path = tmp_path / "m.jsonl"
        write_manifest(manifest, path)
        loaded = read_manifest(path)
        assert [p.ground_truth for p in loaded.documents[0].pages] == nasty

    def test_write_is_byte_stable(self, tmp_path):
        manifest = Manifest(dataset_id="t", documents=[_doc()], seed=3)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_manifest(manifest, a)
        write_manifest(manifest, b)
        assert a.read_bytes() == b.read_bytes()

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"dataset_id": "x", "seed": 0}\nnot json\n', encoding="utf-8")
        with pytest.raises(ManifestError, match="line 2"):
            read_manifest(path)

    def test_duplicate_doc_id_rejected(self, tmp_path):
        manifest = Manifest(dataset_id="t", documents=[_doc("d1"), _doc("d1")], seed=0)
        with pytest.raises(ManifestError, match="duplicate doc_id"):
            write_manifest(manifest, tmp_path / "m.jsonl")

    def test_dangling_image_ref_is_warning_not_error(self, tmp_path):
        manifest = Manifest(dataset_id="t", documents=[_doc()], seed=0)
        path = tmp_path / "m.jsonl"
        write_manifest(manifest, path)
        loaded = read_manifest(path)
        assert loaded.warnings and "image not found" in loaded.warnings[0]

    def test_crlf_ground_truth_normalized_on_read(self, tmp_path):
        path = tmp_path / "m.jsonl"
        lines = [
            json.dumps({"dataset_id": "t", "seed": 0}),
            json.dumps(
                {
                    "doc_id": "d1",
                    "writer_id": "w",
                    "pages": [
                        {"page_id": 1, "image_ref": "p.png", "ground_truth": "a\r\nb", "source_id": "s"}
                    ],
                }
            ),
        ]
        path.write_text("\n".join(lines), encoding="utf-8")
        loaded = read_manifest(path)
        assert loaded.documents[0].pages[0].ground_truth == "a\nb"


class TestUsage:
    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            Usage(ocr_calls=-1)

    def test_addition(self):
        total = Usage(ocr_calls=1, llm_calls=2) + Usage(llm_input_text_tokens=5, llm_calls=1)
        assert total == Usage(ocr_calls=1, llm_input_text_tokens=5, llm_calls=3)


class TestTranscriptionResult:
    def test_guarded_result_must_equal_baseline(self):
        result = TranscriptionResult(
            doc_id="d",
            method_id="m",
            text="llm text",
            usage=Usage(),
            guard_action=GuardAction.FALLBACK_REFUSAL,
            ocr_baseline_text="ocr text",
        )
        with pytest.raises(ValueError, match="OCR baseline"):
            result.validate()

    def test_per_page_texts_must_reassemble(self):
        result = TranscriptionResult(
            doc_id="d",
            method_id="m",
            text="a\n[NEW_PAGE]\nb",
            usage=Usage(),
            per_page_texts=("a", "c"),
        )
        with pytest.raises(ValueError, match="reassemble"):
            result.validate()

    def test_artifact_round_trip(self, tmp_path):
        result = TranscriptionResult(
            doc_id="d",
            method_id="m",
            text="a\n[NEW_PAGE]\nb",
            usage=Usage(ocr_calls=2, llm_calls=1, llm_input_text_tokens=10, llm_output_tokens=4),
            per_page_texts=("a", "b"),
            raw_llm_text="a\n[NEW_PAGE]\nb",
            ocr_baseline_text="x\n[NEW_PAGE]\ny",
            request_ids=("abc",),
            template_hash="fff",
        )
        path = tmp_path / "d.json"
        write_result(result, path)
        assert read_result(path) == result
