"""Dataset format, synthetic generator, vocabulary and batching."""

import json

import numpy as np
import pytest

from loopsign.data import (
    KEYPOINTS,
    PARTS,
    DatasetManifest,
    SkeletonSequence,
    SyntheticTaskSpec,
    Vocabulary,
    collate,
    generate_synthetic,
    load_batch,
    nearest_template_accuracy,
    read_jsonl,
    synthesize,
    write_jsonl,
)
from loopsign.errors import DataError


def make_sequence(frames=4, gloss="hello", seed=0, ident="s0"):
    rng = np.random.default_rng(seed)
    parts = {}
    for p in PARTS:
        xy = rng.normal(size=(frames, KEYPOINTS[p], 2))
        conf = rng.uniform(0, 1, size=(frames, KEYPOINTS[p], 1))
        parts[p] = np.concatenate([xy, conf], axis=-1)
    return SkeletonSequence(ident, gloss, parts)


class TestJsonLines:
    def test_round_trip_is_value_identical(self, tmp_path):
        seqs = [make_sequence(frames=3 + i, gloss=f"w{i}", seed=i, ident=f"s{i}") for i in range(3)]
        path = tmp_path / "x.jsonl"
        write_jsonl(path, seqs)
        back = read_jsonl(path)
        assert [s.id for s in back] == [s.id for s in seqs]
        for a, b in zip(seqs, back):
            assert a.gloss == b.gloss
            for p in PARTS:
                np.testing.assert_array_equal(a.parts[p], b.parts[p])

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        write_jsonl(path, [make_sequence(ident="a"), make_sequence(ident="b")])
        lines = path.read_text().splitlines()
        lines.insert(1, '{"id": "broken", "gloss": "x"')
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match=r"bad\.jsonl:2"):
            read_jsonl(path)

    def test_wrong_keypoint_count_rejected(self, tmp_path):
        seq = make_sequence()
        rec = seq.to_record()
        rec["parts"]["left"] = rec["parts"]["left"][:1] * seq.frames
        rec["parts"]["left"] = [frame[:20] for frame in rec["parts"]["left"]]
        path = tmp_path / "k.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(DataError, match=r"k\.jsonl:1.*left"):
            read_jsonl(path)

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(DataError, match="nope.jsonl"):
            read_jsonl(tmp_path / "nope.jsonl")


class TestVocabulary:
    def test_specials_first(self):
        v = Vocabulary.from_glosses(["b a", "c"])
        assert v.tokens[:3] == ["<pad>", "<bos>", "<eos>"]
        assert (v.pad_id, v.bos_id, v.eos_id) == (0, 1, 2)

    def test_encode_decode(self):
        v = Vocabulary.from_glosses(["good morning", "hello"])
        ids = v.encode("good morning")
        assert v.decode(ids + [v.eos_id, v.pad_id]) == "good morning"

    def test_decode_stops_at_eos(self):
        v = Vocabulary.from_glosses(["a", "b"])
        assert v.decode([v.encode("a")[0], v.eos_id, v.encode("b")[0]]) == "a"

    def test_unknown_word(self):
        v = Vocabulary.from_glosses(["a"])
        with pytest.raises(DataError):
            v.encode("zzz")


class TestCollate:
    def test_batch_of_one_masks_all_frames(self):
        seq = make_sequence(frames=5)
        vocab = Vocabulary.from_glosses([seq.gloss])
        batch = collate([seq], vocab)
        assert batch.frame_mask.shape == (1, 5)
        assert batch.frame_mask.all()
        for p in PARTS:
            assert batch.parts[p].shape == (1, 5, KEYPOINTS[p], 3)

    def test_padding_and_tokens(self):
        a = make_sequence(frames=3, gloss="x y", ident="a")
        b = make_sequence(frames=6, gloss="y", ident="b", seed=1)
        vocab = Vocabulary.from_glosses(["x y", "y"])
        batch = collate([a, b], vocab)
        np.testing.assert_array_equal(batch.frame_mask.sum(1), [3, 6])
        assert np.all(batch.parts["body"][0, 3:] == 0)
        x, y = vocab.encode("x y")
        np.testing.assert_array_equal(batch.tokens_in, [[1, x, y], [1, y, 0]])
        np.testing.assert_array_equal(batch.targets, [[x, y, 2], [y, 2, 0]])
        np.testing.assert_array_equal(batch.text_mask, [[1, 1, 1], [1, 1, 0]])

    def test_pad_to_shorter_than_sample(self):
        seq = make_sequence(frames=5)
        with pytest.raises(DataError):
            collate([seq], Vocabulary.from_glosses([seq.gloss]), pad_to=3)

    def test_normalised_coordinates_in_unit_box(self):
        batch = collate([make_sequence(frames=4)], Vocabulary.from_glosses(["hello"]))
        coords = np.concatenate([batch.parts[p][..., :2].ravel() for p in PARTS])
        assert np.abs(coords).max() == pytest.approx(1.0)


class TestSynthetic:
    def test_keypoint_counts(self, tmp_path):
        spec = SyntheticTaskSpec(num_classes=2, samples_per_class=3, frames=5)
        man = generate_synthetic(spec, tmp_path)
        seq = man.sequence(0)
        assert tuple(seq.parts[p].shape[1] for p in PARTS) == (9, 18, 21, 21)

    def test_noise_free_classes_separable(self):
        spec = SyntheticTaskSpec(num_classes=2, samples_per_class=20, noise=0.0)
        assert nearest_template_accuracy(spec, synthesize(spec)) == 1.0

    def test_ten_classes_separable_without_noise(self):
        spec = SyntheticTaskSpec(num_classes=10, samples_per_class=10, noise=0.0)
        assert nearest_template_accuracy(spec, synthesize(spec)) == 1.0

    def test_accuracy_degrades_with_noise(self):
        accs = []
        for noise in (0.0, 0.3, 1.0):
            spec = SyntheticTaskSpec(num_classes=10, samples_per_class=20, noise=noise)
            accs.append(nearest_template_accuracy(spec, synthesize(spec)))
        assert accs[0] >= accs[1] >= accs[2]
        assert accs[2] < accs[0]

    def test_same_seed_byte_identical(self, tmp_path):
        spec = SyntheticTaskSpec(num_classes=3, samples_per_class=4, frames=6, seed=5)
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        for rel in ("manifest.json", "task.json", "data/train.jsonl", "data/test.jsonl"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        generate_synthetic(SyntheticTaskSpec(num_classes=2, samples_per_class=4, seed=1), tmp_path / "a")
        generate_synthetic(SyntheticTaskSpec(num_classes=2, samples_per_class=4, seed=2), tmp_path / "b")
        assert (tmp_path / "a/data/train.jsonl").read_bytes() != (tmp_path / "b/data/train.jsonl").read_bytes()

    def test_splits_disjoint_and_sized(self, tmp_path):
        spec = SyntheticTaskSpec(num_classes=2, samples_per_class=10)
        man = generate_synthetic(spec, tmp_path)
        sizes = {s: len(man.split(s)) for s in ("train", "val", "test")}
        assert sizes == {"train": 14, "val": 2, "test": 4}
        assert len({r.id for r in man.records}) == len(man)

    def test_templates_distinct(self):
        from loopsign.data import class_templates

        tpls = class_templates(SyntheticTaskSpec(num_classes=10))
        freqs = {tuple(round(t.freq[p], 9) for p in PARTS) for t in tpls}
        assert len(freqs) == 10

    def test_invalid_spec(self):
        with pytest.raises(DataError):
            synthesize(SyntheticTaskSpec(noise=-1.0))


class TestManifest:
    def test_save_load(self, tmp_path):
        man = generate_synthetic(SyntheticTaskSpec(num_classes=2, samples_per_class=3), tmp_path)
        back = DatasetManifest.load(tmp_path / "manifest.json")
        assert [r.id for r in back.records] == [r.id for r in man.records]
        assert back.vocabulary == man.vocabulary
        np.testing.assert_array_equal(back.sequence(2).parts["face"], man.sequence(2).parts["face"])

    def test_label_outside_vocabulary(self, tmp_path):
        generate_synthetic(SyntheticTaskSpec(num_classes=2, samples_per_class=3), tmp_path)
        payload = json.loads((tmp_path / "manifest.json").read_text())
        payload["records"][0]["gloss"] = "unseen"
        (tmp_path / "manifest.json").write_text(json.dumps(payload))
        with pytest.raises(DataError):
            DatasetManifest.load(tmp_path / "manifest.json")

    def test_load_batch_errors(self, tmp_path):
        man = generate_synthetic(SyntheticTaskSpec(num_classes=2, samples_per_class=3), tmp_path)
        with pytest.raises(DataError):
            load_batch(man, [len(man)])
        with pytest.raises(DataError):
            load_batch(man.split("nothing"), [0])
