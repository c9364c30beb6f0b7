from __future__ import annotations

import hashlib
import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from pix2graph.dataset import (
    ImageBuffer,
    ImageRecord,
    class_counts,
    ham10000_records,
    load_image,
    load_manifest,
    stratified_folds,
    synthesize_corpus,
    write_manifest,
)
from pix2graph.errors import ValidationError
from pix2graph.features import color_statistics
from pix2graph.segmentation import apply_mask, slico_segment


def _png(path: Path, arr: np.ndarray, mode: str) -> Path:
    Image.fromarray(arr, mode=mode).save(path)
    return path


def _write_csv(path: Path, rows: list[str]) -> Path:
    path.write_text("\n".join(["id,image_path,mask_path,dx", *rows]) + "\n")
    return path


@pytest.fixture
def tiny_images(tmp_path):
    img = np.zeros((4, 5, 3), dtype=np.uint8)
    img[..., 0] = 200
    _png(tmp_path / "a.png", img, "RGB")
    _png(tmp_path / "b.png", img, "RGB")
    mask = np.zeros((4, 5), dtype=np.uint8)
    mask[1:3, 1:4] = 255
    _png(tmp_path / "a_mask.png", mask, "L")
    return tmp_path


class TestManifest:
    def test_three_rows_in_order(self, tiny_images):
        m = _write_csv(tiny_images / "m.csv", ["x1,a.png,a_mask.png,nv", "x2,b.png,,mel", "x3,a.png,,bkl"])
        recs = load_manifest(m)
        assert [r.id for r in recs] == ["x1", "x2", "x3"]
        assert recs[0].image_path == tiny_images / "a.png"
        assert recs[0].mask_path == tiny_images / "a_mask.png"
        assert recs[1].mask_path is None
        assert [r.is_anomalous for r in recs] == [False, True, True]

    def test_duplicate_id_named(self, tiny_images):
        m = _write_csv(tiny_images / "m.csv", ["ISIC_0001,a.png,,nv", "ISIC_0001,b.png,,nv"])
        with pytest.raises(ValidationError, match="ISIC_0001"):
            load_manifest(m)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope.csv")

    def test_bad_row_reports_line(self, tiny_images):
        m = _write_csv(tiny_images / "m.csv", ["x1,a.png,,nv", "x2,b.png"])
        with pytest.raises(ValidationError, match=":3:"):
            load_manifest(m)

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("id,path,dx\n")
        with pytest.raises(ValidationError, match="header"):
            load_manifest(tmp_path / "m.csv")

    def test_roundtrip_byte_stable(self, tiny_images):
        m = _write_csv(tiny_images / "m.csv", ["x1,a.png,a_mask.png,nv", "x2,b.png,,mel"])
        recs = load_manifest(m)
        out = write_manifest(recs, tiny_images / "m2.csv")
        assert load_manifest(out) == recs
        again = write_manifest(load_manifest(out), tiny_images / "m3.csv")
        assert out.read_bytes() == again.read_bytes()


class TestImages:
    def test_mask_threshold_and_shape(self, tiny_images):
        buf = load_image(ImageRecord("x", tiny_images / "a.png", tiny_images / "a_mask.png", "nv"))
        assert buf.width == 5 and buf.height == 4
        assert buf.mask.dtype == bool and int(buf.mask.sum()) == 6

    def test_grayscale_replicated(self, tmp_path):
        _png(tmp_path / "g.png", np.full((3, 3), 77, dtype=np.uint8), "L")
        buf = load_image(ImageRecord("g", tmp_path / "g.png", None, "nv"))
        assert buf.pixels.shape == (3, 3, 3) and (buf.pixels == 77).all()

    def test_mask_dimension_mismatch(self, tiny_images):
        _png(tiny_images / "bad.png", np.zeros((2, 2), dtype=np.uint8), "L")
        with pytest.raises(ValidationError, match="does not match"):
            load_image(ImageRecord("x", tiny_images / "a.png", tiny_images / "bad.png", "nv"))

    def test_buffer_rejects_nonbinary_mask(self):
        with pytest.raises(ValidationError):
            ImageBuffer(np.zeros((3, 3, 3), np.uint8), mask=np.full((3, 3), 2))

    def test_buffer_rejects_tiny(self):
        with pytest.raises(ValidationError):
            ImageBuffer(np.zeros((1, 3, 3), np.uint8))


class TestHam10000:
    def test_metadata_mapping(self, tmp_path):
        (tmp_path / "meta.csv").write_text(
            "lesion_id,image_id,dx,dx_type,age,sex,localization\n"
            "HAM_1,ISIC_0000001,nv,histo,40,male,back\n"
            "HAM_2,ISIC_0000002,mel,histo,60,female,face\n"
        )
        recs = ham10000_records(tmp_path / "meta.csv", tmp_path / "img", tmp_path / "seg")
        assert [r.id for r in recs] == ["ISIC_0000001", "ISIC_0000002"]
        assert recs[0].image_path == tmp_path / "img" / "ISIC_0000001.jpg"
        assert recs[1].mask_path == tmp_path / "seg" / "ISIC_0000002_segmentation.png"
        assert class_counts(recs) == {"mel": 1, "nv": 1}


class TestFolds:
    def test_six_four_split(self):
        labels = {f"a{i}": "A" for i in range(6)} | {f"b{i}": "B" for i in range(4)}
        fa = stratified_folds(labels, 5, seed=0)
        a = Counter(fa.fold_of[i] for i in labels if labels[i] == "A")
        b = Counter(fa.fold_of[i] for i in labels if labels[i] == "B")
        assert sorted(a[f] for f in range(5)) == [1, 1, 1, 1, 2]
        assert sorted(b[f] for f in range(5)) == [0, 1, 1, 1, 1]

    def test_one_class_five_ids(self):
        fa = stratified_folds({f"x{i}": "nv" for i in range(5)}, 5, seed=3)
        assert sorted(fa.fold_of.values()) == [0, 1, 2, 3, 4]

    def test_seed_dependence(self, small_corpus):
        labels = {r.id: r.dx for r in small_corpus}
        assert stratified_folds(labels, 5, 1) == stratified_folds(labels, 5, 1)
        assert stratified_folds(labels, 5, 1).fold_of != stratified_folds(labels, 5, 2).fold_of

    def test_errors(self):
        with pytest.raises(ValidationError):
            stratified_folds({"a": "x", "b": "x"}, 3, 0)
        with pytest.raises(ValidationError):
            stratified_folds({"a": "x", "b": "x"}, 1, 0)

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.sampled_from("ABCD"), min_size=5, max_size=60),
        st.integers(2, 5),
        st.integers(0, 2**31 - 1),
    )
    def test_partition_and_stratification(self, classes, n_folds, seed):
        labels = {f"id{i}": c for i, c in enumerate(classes)}
        fa = stratified_folds(labels, n_folds, seed)
        assert set(fa.fold_of) == set(labels)
        assert all(0 <= f < n_folds for f in fa.fold_of.values())
        tests = [set(fa.test_ids(f)) for f in range(n_folds)]
        assert set().union(*tests) == set(labels)
        assert sum(len(t) for t in tests) == len(labels)
        for c in set(classes):
            counts = [sum(1 for i in t if labels[i] == c) for t in tests]
            assert max(counts) - min(counts) <= 1


class TestSynthetic:
    def test_empty(self, tmp_path):
        assert synthesize_corpus(tmp_path, 0, 0) == []

    def test_validation(self, tmp_path):
        with pytest.raises(ValidationError):
            synthesize_corpus(tmp_path, 1, 1, width=16)
        with pytest.raises(ValidationError):
            synthesize_corpus(tmp_path, -1, 0)

    def test_byte_identical(self, tmp_path):
        def digest(root: Path) -> dict[str, str]:
            return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
                    for p in sorted(root.rglob("*")) if p.is_file()}

        synthesize_corpus(tmp_path / "a", 6, 4, seed=7)
        synthesize_corpus(tmp_path / "b", 6, 4, seed=7)
        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_labels_and_layout(self, small_corpus):
        dx = Counter(r.dx for r in small_corpus)
        assert dx["nv"] == 30 and sum(dx.values()) == 45
        assert set(dx) == {"nv", "mel", "bcc", "bkl"}
        assert all(r.mask_path is not None and r.mask_path.exists() for r in small_corpus)

    def test_mask_pixel_count_matches_generator(self, small_corpus):
        meta = json.loads((small_corpus[0].image_path.parent.parent / "synth_meta.json").read_text())
        for r in small_corpus[:10]:
            lesion, _, _ = apply_mask(load_image(r), load_image(r).mask)
            assert int(lesion.sum()) == meta["images"][r.id]["lesion_pixels"]

    def test_anomalies_have_more_color_spread(self, frozen_corpus):
        # mean per-segment RGB std over masked SLICO segments
        def spread(rec):
            img = load_image(rec)
            _, _, work = apply_mask(img, img.mask)
            seg = slico_segment(work, 20)
            return np.mean([color_statistics(work, seg.region(i))[3:6].mean() for i in range(seg.n)])

        normal = [spread(r) for r in frozen_corpus if not r.is_anomalous][:60]
        anomalous = [spread(r) for r in frozen_corpus if r.is_anomalous]
        assert np.mean(anomalous) > np.mean(normal)
