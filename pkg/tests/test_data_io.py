"""Corpus parsing, synthetic generation, and checkpoint serialization."""

import json
import struct

import numpy as np
import pytest

from pagegraph.autodiff import ParameterRegistry, Tensor
from pagegraph.data import (
    gen_synthetic,
    load_checkpoint,
    load_corpus,
    load_tensors,
    restore_into,
    save_checkpoint,
    save_corpus,
    save_tensors,
    synthetic_entity_label,
)
from pagegraph.errors import CheckpointError, DataError, NumericError


def write_lines(path, lines):
    path.write_text("\n".join(json.dumps(x) for x in lines) + "\n", encoding="utf-8")


def valid_doc(doc_id="d1"):
    return {
        "id": doc_id,
        "width": 800,
        "height": 600,
        "regions": [
            {"id": "r1", "text": "hello", "box": [10, 10, 120, 40], "label": "question"},
            {"id": "r2", "text": "world", "quad": [200, 10, 320, 10, 320, 40, 200, 40]},
        ],
        "doc_class": 2,
    }


class TestCorpusIO:
    def test_load_valid(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_lines(path, [valid_doc()])
        docs = load_corpus(path)
        assert len(docs) == 1
        assert docs[0].n_regions == 2
        assert docs[0].regions[0].label == "question"
        assert docs[0].regions[1].box.vertices[2] == (320.0, 40.0)
        assert docs[0].doc_class == 2

    def test_round_trip_identity(self, tmp_path):
        src = tmp_path / "a.jsonl"
        dst = tmp_path / "b.jsonl"
        write_lines(src, [valid_doc("d1"), valid_doc("d2")])
        docs = load_corpus(src)
        save_corpus(docs, dst)
        assert load_corpus(dst) == docs

    def test_round_trip_bytes_stable(self, tmp_path):
        first = tmp_path / "a.jsonl"
        second = tmp_path / "b.jsonl"
        docs = gen_synthetic(docs=3, regions_per_doc=4, classes=2, seed=5)
        save_corpus(docs, first)
        save_corpus(load_corpus(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_empty_regions_rejected(self, tmp_path):
        path = tmp_path / "c.jsonl"
        doc = valid_doc()
        doc["regions"] = []
        write_lines(path, [doc])
        with pytest.raises(DataError, match="empty document"):
            load_corpus(path)

    def test_duplicate_region_ids_rejected(self, tmp_path):
        path = tmp_path / "c.jsonl"
        doc = valid_doc()
        doc["regions"][1]["id"] = "r1"
        write_lines(path, [doc])
        with pytest.raises(DataError, match="duplicate region id"):
            load_corpus(path)

    def test_unknown_field_rejected_with_doc_id(self, tmp_path):
        path = tmp_path / "c.jsonl"
        doc = valid_doc()
        doc["surprise"] = 1
        write_lines(path, [doc])
        with pytest.raises(DataError, match=r"'d1'.*surprise"):
            load_corpus(path)

    def test_malformed_box_clamped_with_warning(self, tmp_path):
        path = tmp_path / "c.jsonl"
        doc = valid_doc()
        doc["regions"][0]["box"] = [-50, 10, 120, 700]  # pokes out of the 800x600 page
        write_lines(path, [doc])
        with pytest.warns(UserWarning, match="clamped"):
            docs = load_corpus(path)
        assert docs[0].regions[0].box.vertices[0] == (0.0, 10.0)
        assert docs[0].regions[0].box.vertices[2] == (120.0, 600.0)

    def test_fixture_counts(self, tmp_path):
        path = tmp_path / "c.jsonl"
        lines = []
        for i, count in enumerate((3, 1, 5)):
            doc = valid_doc(f"d{i}")
            doc["regions"] = [
                {"id": f"r{j}", "text": "t", "box": [10 * j, 10, 10 * j + 9, 30]}
                for j in range(count)
            ]
            lines.append(doc)
        write_lines(path, lines)
        assert [d.n_regions for d in load_corpus(path)] == [3, 1, 5]


class TestSynthetic:
    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_corpus(gen_synthetic(20, 12, 4, seed=3), a)
        save_corpus(gen_synthetic(20, 12, 4, seed=3), b)
        assert a.read_bytes() == b.read_bytes()

    def test_labels_follow_rule(self):
        for doc in gen_synthetic(20, 12, 4, seed=3):
            for region in doc.regions:
                (x0, y0), _, (x2, y2), _ = region.box.vertices
                cx, cy = (x0 + x2) / 2, (y0 + y2) / 2
                assert region.label == synthetic_entity_label(cx, cy, doc.width, doc.height)

    def test_counts_and_all_labels_present(self):
        docs = gen_synthetic(20, 12, 4, seed=3)
        assert len(docs) == 20
        assert all(d.n_regions == 12 for d in docs)
        labels = {r.label for d in docs for r in d.regions}
        assert labels == {"question", "answer", "header", "other"}
        assert sorted({d.doc_class for d in docs}) == [0, 1, 2, 3]

    def test_bad_spec(self):
        with pytest.raises(DataError):
            gen_synthetic(0, 5, 2, seed=0)


class TestCheckpointContainer:
    def test_payload_size_single_2x2(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_tensors({"w": np.arange(4.0).reshape(2, 2)}, path)
        blob = path.read_bytes()
        (manifest_len,) = struct.unpack("<Q", blob[:8])
        assert len(blob) == 8 + manifest_len + 16  # 4 values x 4 bytes

    def test_empty_registry_round_trips(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_checkpoint(ParameterRegistry(), path)
        assert len(load_checkpoint(path)) == 0

    def test_round_trip_float32_precision(self, tmp_path):
        path = tmp_path / "t.ckpt"
        rng = np.random.default_rng(0)
        reg = ParameterRegistry()
        reg.register("a/b", Tensor(rng.normal(size=(7, 3))))
        reg.register("a/c", Tensor(rng.normal(size=(4,))))
        save_checkpoint(reg, path)
        loaded = load_checkpoint(path)
        assert loaded.names() == ["a/b", "a/c"]
        for name, tensor in reg.items():
            back = loaded[name].data
            assert back.shape == tensor.data.shape
            rel = np.abs(back - tensor.data) / np.maximum(np.abs(tensor.data), 1e-30)
            assert rel.max() <= 2.0**-24 * (1 + 1e-9)

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        arrays = {"x": np.ones((2, 2)), "y": np.zeros(3)}
        save_tensors(arrays, a)
        save_tensors(arrays, b)
        assert a.read_bytes() == b.read_bytes()

    def test_meta_round_trip(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_tensors({"x": np.ones(1)}, path, meta={"kind": "demo"})
        _, meta = load_tensors(path)
        assert meta == {"kind": "demo"}

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_tensors({"x": np.ones((2, 2))}, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(CheckpointError, match="payload"):
            load_tensors(path)

    def test_non_finite_rejected(self, tmp_path):
        reg = ParameterRegistry()
        reg.register("bad", Tensor(np.array([1.0, np.inf])))
        with pytest.raises(NumericError, match="bad"):
            save_checkpoint(reg, tmp_path / "t.ckpt")

    def test_restore_name_mismatch_names_offender(self, tmp_path):
        path = tmp_path / "t.ckpt"
        reg = ParameterRegistry()
        reg.register("w1", Tensor(np.ones(2)))
        save_checkpoint(reg, path)
        other = ParameterRegistry()
        other.register("w2", Tensor(np.zeros(2)))
        with pytest.raises(CheckpointError, match="w1"):
            restore_into(other, path)

    def test_restore_shape_mismatch(self, tmp_path):
        path = tmp_path / "t.ckpt"
        reg = ParameterRegistry()
        reg.register("w", Tensor(np.ones(2)))
        save_checkpoint(reg, path)
        other = ParameterRegistry()
        other.register("w", Tensor(np.zeros((2, 2))))
        with pytest.raises(CheckpointError, match="shape"):
            restore_into(other, path)

    def test_restore_allows_fresh_heads(self, tmp_path):
        path = tmp_path / "t.ckpt"
        trunk = ParameterRegistry()
        trunk.register("enc/w", Tensor(np.full(3, 7.0)))
        save_checkpoint(trunk, path)
        model = ParameterRegistry()
        model.register("enc/w", Tensor(np.zeros(3)))
        model.register("heads/entity_w", Tensor(np.ones((3, 2))))
        restore_into(model, path, allow_absent=("heads/",))
        np.testing.assert_allclose(model["enc/w"].data, 7.0)
        np.testing.assert_allclose(model["heads/entity_w"].data, 1.0)
