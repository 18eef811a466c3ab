"""Toy encoder and feature interchange tests."""

import numpy as np
import pytest

from w2cspace import encoder
from w2cspace.corpus import LabeledExample, Sentence
from w2cspace.encoder import (FeatureBatch, ToyEncoder, fine_tune_encoder,
                              load_encoder, read_features, save_encoder,
                              toy_encode, write_features)
from w2cspace.errors import ArtifactFormatError, ConfigMismatchError


def sent(ids):
    return Sentence(ids=list(ids), text=" ".join(map(str, ids)))


class TestToyEncode:
    def test_deterministic(self):
        enc = ToyEncoder(vocab_size=10, hidden=16, seed=3)
        s = sent([2, 5, 7])
        a = toy_encode(enc, s).features
        b = toy_encode(enc, s).features
        np.testing.assert_array_equal(a, b)

    def test_shape_contract(self):
        enc = ToyEncoder(10, 16, seed=0)
        fb = toy_encode(enc, sent([2, 3, 4]))
        assert fb.features.shape == (3, 16)

    def test_context_changes_token_vector(self):
        enc = ToyEncoder(10, 16, seed=1)
        a = toy_encode(enc, sent([2, 5, 7])).features
        b = toy_encode(enc, sent([3, 5, 9])).features
        # token 5 sits at position 1 in both sentences with different neighbors
        assert not np.allclose(a[1], b[1])

    def test_same_seed_same_encoder(self):
        a = ToyEncoder(10, 8, seed=9)
        b = ToyEncoder(10, 8, seed=9)
        fb_a = toy_encode(a, sent([1, 2, 3])).features
        fb_b = toy_encode(b, sent([1, 2, 3])).features
        np.testing.assert_array_equal(fb_a, fb_b)


def separable_dataset():
    # class 1 sentences use ids {2,3,4}, class 0 sentences use ids {5,6,7}
    rng = np.random.default_rng(0)
    data = []
    for _ in range(30):
        pos = rng.integers(2, 5, size=5).tolist()
        neg = rng.integers(5, 8, size=5).tolist()
        data.append(LabeledExample(sent(pos), 1))
        data.append(LabeledExample(sent(neg), 0))
    return data


class TestFineTune:
    def test_separable_set_reaches_95_percent(self):
        enc = ToyEncoder(10, 16, seed=4)
        data = separable_dataset()
        trace, head = fine_tune_encoder(enc, data, "sentiment", epochs=10, lr=1e-2)
        assert trace[-1] <= trace[0]
        correct = 0
        for ex in data:
            feats = enc.forward(ex.sentence.ids).data
            logits = feats.mean(axis=0) @ head["w"].data + head["b"].data[0]
            correct += int(np.argmax(logits) == ex.label)
        assert correct / len(data) >= 0.95

    def test_zero_epochs_leaves_encoder_unchanged(self):
        enc = ToyEncoder(10, 8, seed=2)
        before = enc.params.state_arrays()
        trace, _ = fine_tune_encoder(enc, separable_dataset(), "sentiment", epochs=0, lr=1e-2)
        assert trace == []
        for a, b in zip(before, enc.params.state_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_zero_lr_leaves_encoder_unchanged(self):
        enc = ToyEncoder(10, 8, seed=2)
        before = enc.params.state_arrays()
        fine_tune_encoder(enc, separable_dataset(), "sentiment", epochs=3, lr=0.0)
        for a, b in zip(before, enc.params.state_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_correction_task_trains(self):
        enc = ToyEncoder(10, 12, seed=8)
        data = [LabeledExample(sent([2, 3, 4]), [2, 5, 4]),
                LabeledExample(sent([5, 6, 7]), [5, 6, 7])]
        trace, _ = fine_tune_encoder(enc, data, "correction", epochs=5, lr=1e-2)
        assert trace[-1] < trace[0]

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            fine_tune_encoder(ToyEncoder(4, 4, 0), [], "tagging", 1, 1e-3)


class TestFeatureFile:
    def _batches(self):
        rng = np.random.default_rng(6)
        return [FeatureBatch(0, rng.normal(size=(3, 8)).astype(np.float32).astype(np.float64)),
                FeatureBatch(1, rng.normal(size=(5, 8)).astype(np.float32).astype(np.float64))]

    def test_round_trip(self, tmp_path):
        path = tmp_path / "f.w2ce"
        batches = self._batches()
        write_features(path, batches)
        loaded = list(read_features(path))
        assert [fb.sentence_id for fb in loaded] == [0, 1]
        assert [fb.d for fb in loaded] == [3, 5]
        for a, b in zip(batches, loaded):
            np.testing.assert_array_equal(a.features, b.features)

    def test_truncated_file_yields_nothing_partial(self, tmp_path):
        path = tmp_path / "f.w2ce"
        write_features(path, self._batches())
        path.write_bytes(path.read_bytes()[:-9])
        reader = read_features(path)
        first = next(reader)
        assert first.d == 3
        with pytest.raises(ArtifactFormatError, match="truncated"):
            next(reader)

    def test_h_mismatch(self, tmp_path):
        path = tmp_path / "f.w2ce"
        write_features(path, self._batches())
        with pytest.raises(ConfigMismatchError, match="h=8"):
            list(read_features(path, expected_h=16))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.w2ce"
        path.write_bytes(b"XXXX" + bytes(30))
        with pytest.raises(ArtifactFormatError, match="magic"):
            list(read_features(path))

    def test_empty_file(self, tmp_path):
        path = tmp_path / "f.w2ce"
        write_features(path, [])
        assert list(read_features(path)) == []

    def test_mixed_h_rejected_on_write(self, tmp_path):
        rng = np.random.default_rng(1)
        bad = [FeatureBatch(0, rng.normal(size=(2, 4))),
               FeatureBatch(1, rng.normal(size=(2, 6)))]
        with pytest.raises(ValueError):
            write_features(tmp_path / "f.w2ce", bad)


class TestExchangeability:
    def test_file_and_toy_paths_agree_after_f32(self, tmp_path):
        enc = ToyEncoder(10, 8, seed=5)
        sentences = [sent([1, 2, 3]), sent([4, 5, 6, 7])]
        toy = [toy_encode(enc, s, i) for i, s in enumerate(sentences)]
        path = tmp_path / "f.w2ce"
        write_features(path, toy)
        from_file = list(read_features(path))
        for direct, filed in zip(toy, from_file):
            snapped = direct.features.astype(np.float32).astype(np.float64)
            np.testing.assert_array_equal(snapped, filed.features)


class TestEncoderCheckpoint:
    def test_round_trip_preserves_outputs(self, tmp_path):
        enc = ToyEncoder(12, 8, seed=11)
        fine_tune_encoder(enc, separable_dataset(), "sentiment", epochs=1, lr=1e-2)
        # snap to the checkpoint's precision before comparing
        for t in enc.params.tensors():
            t.data = t.data.astype(np.float32).astype(np.float64)
        path = tmp_path / "enc.w2ct"
        save_encoder(enc, path)
        loaded = load_encoder(path)
        s = sent([2, 9, 4])
        np.testing.assert_array_equal(toy_encode(enc, s).features,
                                      toy_encode(loaded, s).features)

    def test_format_guard(self, tmp_path):
        path = tmp_path / "enc.w2ct"
        save_encoder(ToyEncoder(4, 4, 0), path)
        with pytest.raises(ArtifactFormatError):
            from w2cspace.artifacts import read_blob_file
            read_blob_file(path, "w2c-space")
