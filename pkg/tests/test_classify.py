"""Distance features, heads, downstream training discipline, and the
evaluation metric recipes."""

import numpy as np
import pytest

from w2cspace import autodiff as ad
from w2cspace.classify import (TaskHead, context_relative_distance,
                               downstream_loss, evaluate_classification,
                               evaluate_correction, load_head, map_coords,
                               save_head, sequence_classify, token_classify,
                               train_downstream)
from w2cspace.contexts import ContextSpace, kmeans_cluster
from w2cspace.corpus import LabeledExample, Sentence
from w2cspace.encoder import FeatureBatch, ToyEncoder, toy_encode
from w2cspace.errors import ConfigMismatchError, DegenerateInputError
from w2cspace.mapper import MapperNet


def space_from(centroids, merge=None):
    c = np.asarray(centroids, dtype=np.float64)
    m = np.eye(c.shape[0]) if merge is None else np.asarray(merge, dtype=np.float64)
    return ContextSpace(c, m, seed=0)


class TestContextRelativeDistance:
    def test_matching_context_scores_one(self):
        space = space_from([[1.0, 0.0], [0.0, 1.0]])
        d = context_relative_distance(space, np.array([[1.0, 0.0]]))
        assert d[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_shape(self):
        space = space_from(np.random.default_rng(0).normal(size=(3, 4)))
        d = context_relative_distance(space, np.random.default_rng(1).normal(size=(2, 4)))
        assert d.shape == (2, 3)

    def test_bounded(self):
        rng = np.random.default_rng(2)
        space = space_from(rng.normal(size=(5, 3)), rng.normal(size=(5, 5)))
        d = context_relative_distance(space, rng.normal(size=(7, 3)))
        assert np.all(d >= -1.0) and np.all(d <= 1.0)

    def test_zero_norm_merged_context_rejected(self):
        space = space_from([[1.0, 0.0], [0.0, 1.0]], merge=np.zeros((2, 2)))
        with pytest.raises(DegenerateInputError, match="merged context"):
            context_relative_distance(space, np.array([[1.0, 0.0]]))

    def test_n_mismatch(self):
        space = space_from([[1.0, 0.0]])
        with pytest.raises(ConfigMismatchError):
            context_relative_distance(space, np.ones((2, 3)))

    def test_identity_merge_neutrality(self):
        # distances with the identity merge equal distances against the
        # raw centroids (merging skipped entirely)
        rng = np.random.default_rng(3)
        space = space_from(rng.normal(size=(4, 6)))
        coords = rng.normal(size=(5, 6))
        d = context_relative_distance(space, coords)
        raw = ad.cosine_rows(ad.constant(coords), ad.constant(space.centroids)).data
        np.testing.assert_array_equal(d, raw)


class TestHeads:
    def test_zero_weights_give_uniform_rows(self):
        head = TaskHead("correction", k=4, out_dim=10, seed=0)
        head.params["head.w"].data[:] = 0.0
        probs = token_classify(head, np.random.default_rng(0).normal(size=(3, 4)))
        np.testing.assert_allclose(probs, 0.1)

    def test_token_rows_normalized(self):
        head = TaskHead("correction", k=4, out_dim=10, seed=1)
        probs = token_classify(head, np.random.default_rng(1).normal(size=(3, 4)))
        assert probs.shape == (3, 10)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_sequence_distribution(self):
        head = TaskHead("sentiment", k=4, out_dim=2, seed=2)
        probs = sequence_classify(head, np.random.default_rng(2).normal(size=(5, 4)))
        assert probs.shape == (2,)
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)

    def test_single_token_pooling_is_identity(self):
        head = TaskHead("sentiment", k=3, out_dim=2, seed=3)
        row = np.random.default_rng(3).normal(size=(1, 3))
        np.testing.assert_allclose(sequence_classify(head, row),
                                   sequence_classify(head, np.vstack([row, row])))

    def test_duplicated_sentence_same_prediction(self):
        head = TaskHead("sentiment", k=4, out_dim=2, seed=4)
        d = np.random.default_rng(4).normal(size=(6, 4))
        np.testing.assert_allclose(sequence_classify(head, d),
                                   sequence_classify(head, np.vstack([d, d])))

    def test_empty_sentence_rejected(self):
        head = TaskHead("sentiment", k=2, out_dim=2, seed=0)
        with pytest.raises(DegenerateInputError):
            sequence_classify(head, np.zeros((0, 2)))

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            TaskHead("parsing", 2, 2, 0)


def build_stack(seed=0, n=6, k=3, h=10, vocab=12):
    rng = np.random.default_rng(seed)
    mapper = MapperNet(h, n, seed=seed)
    elements = rng.normal(size=(30, n))
    space = kmeans_cluster(elements, k=k, seed=seed)
    enc = ToyEncoder(vocab, h, seed=seed + 1)
    return mapper, space, enc


def sentiment_data(enc, n_examples=40, seed=0):
    rng = np.random.default_rng(seed)
    examples, features = [], []
    for i in range(n_examples):
        label = i % 2
        lo, hi = (2, 7) if label else (7, 12)
        ids = rng.integers(lo, hi, size=int(rng.integers(3, 7))).tolist()
        sent = Sentence(ids=ids, text="")
        examples.append(LabeledExample(sent, label))
        features.append(toy_encode(enc, sent, i))
    return examples, features


def separable_stack(seed, k=4, h=10, n=6):
    """Class token communities with antipodal feature directions; the
    space is clustered from the data's own mapped coordinates, so the
    distance features are linearly separable by construction."""
    rng = np.random.default_rng(seed)
    mapper = MapperNet(h, n, seed=seed)
    anchor = rng.normal(size=h)
    anchor /= np.linalg.norm(anchor)
    table = np.zeros((12, h))
    table[2:7] = anchor + 0.3 * rng.normal(size=(5, h))
    table[7:12] = -anchor + 0.3 * rng.normal(size=(5, h))
    examples, features = [], []
    for i in range(60):
        label = i % 2
        lo, hi = (2, 7) if label else (7, 12)
        ids = rng.integers(lo, hi, size=int(rng.integers(3, 7))).tolist()
        sent = Sentence(ids=ids, text="")
        examples.append(LabeledExample(sent, label))
        features.append(FeatureBatch(i, table[ids]))
    elements = np.concatenate([map_coords(mapper, fb) for fb in features])
    space = kmeans_cluster(elements, k=k, seed=seed)
    return mapper, space, examples, features


class TestTrainDownstream:
    def test_zero_lr_moves_nothing(self):
        mapper, space, enc = build_stack()
        examples, features = sentiment_data(enc, 10)
        head = TaskHead("sentiment", space.k, 2, seed=5)
        merge_before = space.merge.copy()
        head_before = head.params.state_arrays()
        train_downstream(space, mapper, features, examples, head, epochs=2, lr=0.0)
        np.testing.assert_array_equal(space.merge, merge_before)
        for a, b in zip(head_before, head.params.state_arrays()):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_separable_set_trains_to_95(self, seed):
        mapper, space, examples, features = separable_stack(seed)
        head = TaskHead("sentiment", space.k, 2, seed=seed + 10)
        train_downstream(space, mapper, features, examples, head, epochs=10, lr=5e-2)
        preds = []
        for fb in features:
            dist = context_relative_distance(space, map_coords(mapper, fb))
            preds.append(int(np.argmax(sequence_classify(head, dist))))
        acc = evaluate_classification(preds, [ex.label for ex in examples])
        assert acc >= 95.0

    def test_merge_matrix_moves_and_frozen_parts_do_not(self):
        mapper, space, enc = build_stack(seed=4)
        examples, features = sentiment_data(enc, 20, seed=4)
        head = TaskHead("sentiment", space.k, 2, seed=7)
        mapper_before = mapper.params.state_arrays()
        centroids_before = space.centroids.copy()
        train_downstream(space, mapper, features, examples, head, epochs=3, lr=1e-2)
        assert np.abs(space.merge - np.eye(space.k)).max() > 0.0
        np.testing.assert_array_equal(space.centroids, centroids_before)
        for a, b in zip(mapper_before, mapper.params.state_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_gradient_through_merge_and_distance(self):
        # finite-difference check of the composite loss wrt merge + head
        rng = np.random.default_rng(8)
        k, n = 3, 4
        centroids = rng.normal(size=(k, n))
        coords = rng.normal(size=(5, n))
        head = TaskHead("sentiment", k, 2, seed=8)
        store = ad.ParamStore()
        merge = store.add("merge", np.eye(k) + 0.01 * rng.normal(size=(k, k)))
        joint = ad.ParamStore.union(store, head.params)
        assert ad.grad_check(
            lambda: downstream_loss(merge, centroids, head, coords, 1),
            joint, step=1e-5) < 1e-4

    def test_gradient_token_task(self):
        rng = np.random.default_rng(9)
        k, n, v = 3, 4, 7
        centroids = rng.normal(size=(k, n))
        coords = rng.normal(size=(4, n))
        head = TaskHead("correction", k, v, seed=9)
        store = ad.ParamStore()
        merge = store.add("merge", np.eye(k) + 0.01 * rng.normal(size=(k, k)))
        joint = ad.ParamStore.union(store, head.params)
        assert ad.grad_check(
            lambda: downstream_loss(merge, centroids, head, coords, [1, 0, 6, 3]),
            joint, step=1e-5) < 1e-4

    def test_k_mismatch_rejected(self):
        mapper, space, enc = build_stack()
        examples, features = sentiment_data(enc, 4)
        head = TaskHead("sentiment", space.k + 1, 2, seed=0)
        with pytest.raises(ConfigMismatchError):
            train_downstream(space, mapper, features, examples, head, 1, 1e-2)


class TestCorrectionEndToEnd:
    """The synthetic correction oracle: sentences repeat one token, one
    interior position gets replaced by a wrong token, and the trained
    stack must restore it from context.  Boundary positions are excluded
    from corruption: their one-sided context genuinely under-determines
    the fix."""

    TOKENS = list(range(2, 10))
    V = 10

    def _gen(self, n, seed):
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(n):
            tok = int(rng.choice(self.TOKENS))
            length = int(rng.integers(5, 10))
            target = [tok] * length
            source = list(target)
            if rng.uniform() < 0.6:
                p = int(rng.integers(1, length - 1))
                source[p] = int(rng.choice([t for t in self.TOKENS if t != tok]))
            out.append(LabeledExample(Sentence(ids=source, text=""), target))
        return out

    def test_corrupted_tokens_restored(self):
        from w2cspace.assoc import AssocNetwork
        from w2cspace.classify import predict_tokens
        from w2cspace.encoder import fine_tune_encoder
        from w2cspace.mapper import ReconNet, train_mapper

        seed0 = 10
        train = self._gen(800, seed0 + 1)
        test = self._gen(200, seed0 + 2)
        rng = np.random.default_rng(seed0 + 3)
        clean = [Sentence(ids=[int(t)] * int(rng.integers(5, 10)), text="")
                 for t in rng.choice(self.TOKENS, size=400)]
        akn = AssocNetwork(self.V, 0.95)
        akn.build(clean)
        enc = ToyEncoder(self.V, 16, seed=seed0 + 4)
        fine_tune_encoder(enc, train, "correction", epochs=3, lr=1e-2)
        feat_clean = [toy_encode(enc, s, i) for i, s in enumerate(clean)]
        feat_train = [toy_encode(enc, ex.sentence, i) for i, ex in enumerate(train)]
        feat_test = [toy_encode(enc, ex.sentence, i) for i, ex in enumerate(test)]
        mapper = MapperNet(16, 8, seed=seed0 + 5)
        rnet = ReconNet(16, 8, seed=seed0 + 5)
        train_mapper(mapper, rnet, list(zip(clean, feat_clean)), akn, epochs=2, lr=3e-3)
        elements = np.concatenate([map_coords(mapper, fb) for fb in feat_clean])
        space = kmeans_cluster(elements, k=12, seed=seed0 + 6)
        head = TaskHead("correction", 12, self.V, seed=seed0 + 7)
        train_downstream(space, mapper, feat_train, train, head, epochs=10, lr=5e-2)

        hit = tot = 0
        for ex, fb in zip(test, feat_test):
            pred = predict_tokens(space, mapper, head, fb)
            for p, (s, t) in enumerate(zip(ex.sentence.ids, ex.label)):
                if s != t:
                    tot += 1
                    hit += int(pred[p] == t)
        assert tot > 50
        assert hit / tot >= 0.95


class TestEvaluateCorrection:
    def test_perfect_predictions(self):
        triples = [([1, 2, 3], [1, 5, 3], [1, 5, 3]),
                   ([4, 4], [4, 4], [4, 4])]
        m = evaluate_correction(triples)
        for prf in (m.word_detection, m.word_correction,
                    m.sentence_detection, m.sentence_correction):
            assert prf.precision == 100.0
            assert prf.recall == 100.0
            assert prf.f1 == 100.0

    def test_no_edits_on_errorful_set(self):
        triples = [([1, 2], [1, 3], [1, 2])]
        m = evaluate_correction(triples)
        assert m.word_detection.recall == 0.0
        assert m.word_detection.precision == 0.0
        assert m.sentence_correction.f1 == 0.0

    def test_hand_counted_sentence_level_cp(self):
        # two errorful sentences: one fully fixed, one only half fixed
        fixed = ([1, 2, 3, 4], [1, 5, 3, 6], [1, 5, 3, 6])
        half = ([7, 8, 9], [7, 1, 2], [7, 1, 9])
        m = evaluate_correction([fixed, half])
        assert m.sentence_correction.precision == 50.0

    def test_false_positive_edit_hits_precision(self):
        # model edits a clean sentence: sentence-level precision suffers
        triples = [([1, 2], [1, 3], [1, 3]),
                   ([4, 5], [4, 5], [4, 6])]
        m = evaluate_correction(triples)
        assert m.sentence_detection.precision == 50.0
        assert m.sentence_detection.recall == 100.0

    def test_detection_does_not_require_exact_token(self):
        # wrong replacement at the right position: detected, not corrected
        triples = [([1, 2], [1, 3], [1, 9])]
        m = evaluate_correction(triples)
        assert m.word_detection.recall == 100.0
        assert m.word_correction.recall == 0.0

    def test_misaligned_triple_rejected(self):
        with pytest.raises(ValueError, match="triple 0"):
            evaluate_correction([([1, 2], [1], [1, 2])])

    def test_f1_between_p_and_r(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            v = 4
            length = int(rng.integers(1, 8))
            src = rng.integers(0, v, size=length).tolist()
            tgt = [s if rng.uniform() < 0.6 else int(rng.integers(0, v)) for s in src]
            pred = [t if rng.uniform() < 0.6 else int(rng.integers(0, v)) for t in tgt]
            m = evaluate_correction([(src, tgt, pred)])
            for prf in (m.word_detection, m.word_correction,
                        m.sentence_detection, m.sentence_correction):
                if prf.precision + prf.recall > 0:
                    assert min(prf.precision, prf.recall) <= prf.f1 <= max(prf.precision, prf.recall)

    def test_order_invariance(self):
        rng = np.random.default_rng(12)
        triples = []
        for _ in range(20):
            length = int(rng.integers(1, 6))
            src = rng.integers(0, 5, size=length).tolist()
            tgt = [s if rng.uniform() < 0.5 else int(rng.integers(0, 5)) for s in src]
            pred = [t if rng.uniform() < 0.5 else int(rng.integers(0, 5)) for t in tgt]
            triples.append((src, tgt, pred))
        m1 = evaluate_correction(triples)
        m2 = evaluate_correction(list(reversed(triples)))
        assert m1.as_dict() == m2.as_dict()


class TestEvaluateClassification:
    def test_all_correct(self):
        assert evaluate_classification([1, 0, 1], [1, 0, 1]) == 100.0

    def test_half_correct(self):
        assert evaluate_classification([1, 0], [1, 1]) == 50.0

    def test_empty_rejected(self):
        with pytest.raises(DegenerateInputError):
            evaluate_classification([], [])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_classification([1], [1, 0])


class TestHeadCheckpoint:
    def test_round_trip(self, tmp_path):
        head = TaskHead("sentiment", 4, 2, seed=13)
        for t in head.params.tensors():
            t.data = t.data.astype(np.float32).astype(np.float64)
        path = tmp_path / "h.w2ch"
        save_head(head, path)
        loaded = load_head(path)
        assert loaded.task == "sentiment"
        d = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(sequence_classify(head, d),
                                      sequence_classify(loaded, d))
