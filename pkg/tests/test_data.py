import hashlib
import math
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from czsl.data import (
    DatasetManifest,
    LabelSpace,
    ManifestRecord,
    generate_synthetic,
    init_semantic_embeddings,
    load_manifest,
    load_split,
    save_manifest,
)
from czsl.errors import ConfigurationError, DataValidationError


def _write_png(path, value=120, size=32):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((size, size, 3), value, dtype=np.uint8)).save(path)


def _dir_hashes(root):
    out = {}
    for p in sorted(Path(root).rglob("*.png")):
        out[p.relative_to(root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


class TestLabelSpace:
    def test_rejects_uncovered_attribute(self):
        with pytest.raises(DataValidationError, match="wet"):
            LabelSpace(("dry", "wet"), ("cat",), ((0, 0), (1, 0)), (True, False))

    def test_rejects_duplicate_pairs(self):
        with pytest.raises(DataValidationError, match="duplicate"):
            LabelSpace(("dry",), ("cat",), ((0, 0), (0, 0)), (True, True))

    def test_rejects_out_of_range(self):
        with pytest.raises(DataValidationError, match="out of range"):
            LabelSpace(("dry",), ("cat",), ((0, 1),), (True,))

    def test_index_arrays(self):
        space = LabelSpace(("a", "b"), ("x",), ((0, 0), (1, 0)), (True, True))
        assert space.comp_attr.tolist() == [0, 1]
        assert space.comp_obj.tolist() == [0, 0]


class TestGeneration:
    def test_2x2_counts_and_cover(self, tmp_path):
        # 0.75 of 4 pairs -> exactly 3 seen, 1 unseen; 3 seen pairs cover all 4 primitives
        generate_synthetic(tmp_path, 2, 2, 0.75, 4, image_size=32, seed=7)
        space, manifest = load_manifest(tmp_path / "manifest.tsv")
        assert space.n_comps == 4
        assert int(space.seen.sum()) == 3
        train_pairs = {
            (r.attribute, r.object) for r in manifest.split_records("train")
        }
        assert len(train_pairs) == 3
        # unseen pair gets ceil(4/2)=2 test images
        unseen = [p for p, s in zip(space.compositions, space.seen_mask) if not s][0]
        name = (space.attributes[unseen[0]], space.objects[unseen[1]])
        test_recs = [
            r for r in manifest.split_records("test")
            if (r.attribute, r.object) == name
        ]
        assert len(test_recs) == 2
        assert all((r.attribute, r.object) != name for r in manifest.split_records("train"))

    def test_train_disjoint_from_unseen_and_primitives_covered(self, tmp_path):
        for i, (na, no) in enumerate([(2, 3), (3, 2), (4, 4)]):
            root = tmp_path / f"d{i}"
            generate_synthetic(root, na, no, 0.8, 1, image_size=32, seed=i)
            space, manifest = load_manifest(root / "manifest.tsv")
            seen_pairs = {
                p for p, s in zip(space.compositions, space.seen_mask) if s
            }
            train_pairs = {
                (space.attributes.index(r.attribute), space.objects.index(r.object))
                for r in manifest.split_records("train")
            }
            assert train_pairs == seen_pairs
            assert {a for a, _ in seen_pairs} == set(range(space.n_attrs))
            assert {o for _, o in seen_pairs} == set(range(space.n_objs))

    def test_byte_identical_across_runs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_synthetic(a, 2, 2, 0.75, 3, image_size=32, seed=3)
        generate_synthetic(b, 2, 2, 0.75, 3, image_size=32, seed=3)
        assert (a / "manifest.tsv").read_text() == (b / "manifest.tsv").read_text()
        assert _dir_hashes(a) == _dir_hashes(b)

    def test_different_seed_changes_images(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_synthetic(a, 2, 2, 0.75, 2, image_size=32, seed=3)
        generate_synthetic(b, 2, 2, 0.75, 2, image_size=32, seed=4)
        assert _dir_hashes(a) != _dir_hashes(b)

    def test_images_decode_in_unit_range(self, tmp_path):
        generate_synthetic(tmp_path, 2, 2, 0.75, 2, image_size=32, seed=5)
        space, manifest = load_manifest(tmp_path / "manifest.tsv")
        split = load_split(manifest, space, "train")
        assert split.images.shape[1:] == (3, 32, 32)
        assert split.images.dtype == np.float32
        assert split.images.min() >= 0.0 and split.images.max() <= 1.0
        # composition indices agree with the (attribute, object) pair
        for k in range(len(split)):
            a, o = space.compositions[split.comp_idx[k]]
            assert a == split.attr_idx[k] and o == split.obj_idx[k]

    def test_solid_vs_striped_fills_differ(self, tmp_path):
        # both fill textures must show up so low-level cues matter
        generate_synthetic(tmp_path, 2, 2, 0.75, 1, image_size=32, seed=5)
        space, _ = load_manifest(tmp_path / "manifest.tsv")
        assert any(a.startswith("striped-") for a in space.attributes)
        assert any(not a.startswith("striped-") for a in space.attributes)

    def test_config_errors(self, tmp_path):
        with pytest.raises(ConfigurationError):
            generate_synthetic(tmp_path, 1, 2, 0.75, 1)
        with pytest.raises(ConfigurationError):
            generate_synthetic(tmp_path, 2, 2, 0.75, 1, image_size=16)
        with pytest.raises(ConfigurationError):  # no unseen pair left
            generate_synthetic(tmp_path, 2, 2, 1.0, 1)
        with pytest.raises(ConfigurationError):  # cannot cover primitives
            generate_synthetic(tmp_path, 4, 4, 0.2, 1)
        with pytest.raises(ConfigurationError):  # vocabulary bound
            generate_synthetic(tmp_path, 40, 2, 0.9, 1)

    def test_utzappos_scale_supported(self, tmp_path):
        # 16 attribute states x 12 object kinds
        generate_synthetic(tmp_path, 16, 12, 0.9, 1, image_size=32, seed=2)
        space, _ = load_manifest(tmp_path / "manifest.tsv")
        assert space.n_attrs == 16 and space.n_objs == 12


class TestManifestIO:
    def test_roundtrip_exact(self, tiny_dataset):
        root, space, manifest = tiny_dataset
        copy = save_manifest(manifest, root / "copy.tsv")
        space2, manifest2 = load_manifest(copy)
        assert manifest2.records == manifest.records
        assert space2 == space

    def test_three_line_manifest_hand_parse(self, tmp_path):
        # 2 train records (seen pairs), 1 test record (unseen pair)
        for rel in ("i1.png", "i2.png", "i3.png"):
            _write_png(tmp_path / rel)
        (tmp_path / "m.tsv").write_text(
            "split\tattribute\tobject\timage\n"
            "train\tred\that\ti1.png\n"
            "train\tblue\tshoe\ti2.png\n"
            "test\tred\tshoe\ti3.png\n"
        )
        space, manifest = load_manifest(tmp_path / "m.tsv")
        assert space.n_comps == 3
        assert int(space.seen.sum()) == 2
        assert space.attributes == ("blue", "red")  # lexicographic
        assert space.objects == ("hat", "shoe")
        assert len(manifest.records) == 3

    def test_test_only_attribute_named_in_error(self, tmp_path):
        for rel in ("i1.png", "i2.png"):
            _write_png(tmp_path / rel)
        (tmp_path / "m.tsv").write_text(
            "split\tattribute\tobject\timage\n"
            "train\tred\that\ti1.png\n"
            "test\tghostly\that\ti2.png\n"
        )
        with pytest.raises(DataValidationError, match="ghostly"):
            load_manifest(tmp_path / "m.tsv")

    def test_missing_image_named_in_error(self, tmp_path):
        (tmp_path / "m.tsv").write_text(
            "split\tattribute\tobject\timage\ntrain\tred\that\tnope.png\n"
        )
        with pytest.raises(DataValidationError, match="nope.png"):
            load_manifest(tmp_path / "m.tsv")

    def test_malformed_line_rejected(self, tmp_path):
        _write_png(tmp_path / "i.png")
        (tmp_path / "m.tsv").write_text(
            "split\tattribute\tobject\timage\ntrain\tred\ti.png\n"
        )
        with pytest.raises(DataValidationError, match="4 tab-separated"):
            load_manifest(tmp_path / "m.tsv")

    def test_bad_header_and_unknown_split(self, tmp_path):
        _write_png(tmp_path / "i.png")
        (tmp_path / "m.tsv").write_text("a\tb\tc\td\n")
        with pytest.raises(DataValidationError, match="header"):
            load_manifest(tmp_path / "m.tsv")
        (tmp_path / "m2.tsv").write_text(
            "split\tattribute\tobject\timage\nfoo\tred\that\ti.png\n"
        )
        with pytest.raises(DataValidationError, match="unknown split"):
            load_manifest(tmp_path / "m2.tsv")

    def test_val_and_test_unseen_overlap_accepted(self, tmp_path):
        # the same unseen pair may appear in both val and test
        for rel in ("i1.png", "i2.png", "i3.png", "i4.png"):
            _write_png(tmp_path / rel)
        (tmp_path / "m.tsv").write_text(
            "split\tattribute\tobject\timage\n"
            "train\tred\that\ti1.png\n"
            "train\tblue\tshoe\ti2.png\n"
            "val\tred\tshoe\ti3.png\n"
            "test\tred\tshoe\ti4.png\n"
        )
        space, _ = load_manifest(tmp_path / "m.tsv")
        assert int((~space.seen).sum()) == 1


class TestEmbeddings:
    def test_seeded_unit_norm_and_deterministic(self):
        space = LabelSpace(("a", "b"), ("x", "y"),
                           ((0, 0), (0, 1), (1, 0), (1, 1)),
                           (True, True, True, True))
        t1 = init_semantic_embeddings(space, 32, seed=9)
        t2 = init_semantic_embeddings(space, 32, seed=9)
        assert np.array_equal(t1.attributes, t2.attributes)
        assert np.array_equal(t1.objects, t2.objects)
        norms = np.linalg.norm(np.vstack([t1.attributes, t1.objects]), axis=1)
        assert np.allclose(norms, 1.0, atol=1e-6)
        t3 = init_semantic_embeddings(space, 32, seed=10)
        assert not np.allclose(t1.attributes, t3.attributes)

    def test_name_keyed_not_position_keyed(self):
        s1 = LabelSpace(("a", "b"), ("x",), ((0, 0), (1, 0)), (True, True))
        s2 = LabelSpace(("b", "a"), ("x",), ((0, 0), (1, 0)), (True, True))
        t1 = init_semantic_embeddings(s1, 16, seed=3)
        t2 = init_semantic_embeddings(s2, 16, seed=3)
        assert np.array_equal(t1.attributes[0], t2.attributes[1])  # both are "a"

    def test_word2vec_dim_supported(self):
        space = LabelSpace(("a",), ("x",), ((0, 0),), (True,))
        table = init_semantic_embeddings(space, 300, seed=0)
        assert table.dim == 300

    def test_file_source(self, tmp_path):
        space = LabelSpace(("red",), ("hat",), ((0, 0),), (True,))
        (tmp_path / "emb.txt").write_text("red 1 0 0\nhat 0 1 0\nextra 0 0 1\n")
        table = init_semantic_embeddings(space, 3, source="file",
                                         path=tmp_path / "emb.txt")
        assert table.attributes[0].tolist() == [1.0, 0.0, 0.0]
        assert table.objects[0].tolist() == [0.0, 1.0, 0.0]

    def test_file_missing_names_all_listed(self, tmp_path):
        space = LabelSpace(("red", "blue"), ("hat",),
                           ((0, 0), (1, 0)), (True, True))
        (tmp_path / "emb.txt").write_text("red 1 0\n")
        with pytest.raises(DataValidationError) as err:
            init_semantic_embeddings(space, 2, source="file", path=tmp_path / "emb.txt")
        assert "blue" in str(err.value) and "hat" in str(err.value)

    def test_file_wrong_width_rejected(self, tmp_path):
        space = LabelSpace(("red",), ("hat",), ((0, 0),), (True,))
        (tmp_path / "emb.txt").write_text("red 1 0 0\nhat 0 1 0\n")
        with pytest.raises(DataValidationError):
            init_semantic_embeddings(space, 2, source="file", path=tmp_path / "emb.txt")

    def test_dim_floor(self):
        space = LabelSpace(("red",), ("hat",), ((0, 0),), (True,))
        with pytest.raises(ConfigurationError):
            init_semantic_embeddings(space, 1)
