import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seesawface.architectures import build_model, get_spec, scale_spec
from seesawface.verification import (
    PairSet,
    best_threshold,
    cosine_score,
    embed_images,
    evaluate_model,
    kfold_accuracy,
    l2_normalize,
    preprocess,
)


class TestPreprocess:
    def test_pixel_values(self):
        img = np.zeros((112, 112, 3), np.uint8)
        img[0, 0] = (128, 0, 255)
        out = preprocess(img)
        assert out.shape == (3, 112, 112) and out.dtype == np.float32
        assert out[:, 0, 0].tolist() == [0.00390625, -0.99609375, 0.99609375]

    def test_affine_invertible(self):
        levels = np.arange(256, dtype=np.uint8)
        img = np.broadcast_to(levels[:, None, None], (256, 1, 3)).copy()
        out = preprocess(img, (256, 1))
        back = np.round(out * 128 + 127.5).astype(int)
        assert back[0, :, 0].tolist() == list(range(256))
        assert len(np.unique(out)) == 256

    def test_wrong_shape(self):
        with pytest.raises(ValueError, match="shape"):
            preprocess(np.zeros((112, 112), np.uint8))

    def test_wrong_dtype(self):
        with pytest.raises(ValueError, match="uint8"):
            preprocess(np.zeros((112, 112, 3), np.float32))


class TestCosine:
    def test_cases(self):
        e = np.array([1.0, 2.0, -3.0])
        assert cosine_score(e, e) == pytest.approx(1.0)
        assert cosine_score(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0
        assert cosine_score(e, -e) == pytest.approx(-1.0)

    def test_zero(self):
        with pytest.raises(ValueError, match="zero"):
            cosine_score(np.zeros(3), np.ones(3))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000), c=st.floats(1e-3, 1e3))
    def test_symmetry_and_scale(self, seed, c):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((2, 16))
        s = cosine_score(a, b)
        assert s == cosine_score(b, a)
        assert cosine_score(c * a, b) == pytest.approx(s, abs=1e-12)
        assert -1.0 <= s <= 1.0


class TestKFold:
    def test_separable(self, rng):
        labels = np.tile([True, False], 50)
        scores = np.where(labels, rng.uniform(0.9, 1.0, 100), rng.uniform(-1, 0.1, 100))
        res = kfold_accuracy(scores, labels)
        assert res.accuracy == 1.0
        assert len(res.thresholds) == 10
        assert all(0.1 < t < 0.9 for t in res.thresholds)

    def test_constant_scores_give_class_prior(self, rng):
        # each fold of 10 holds 7 "same" pairs, so the training majority is always "same"
        labels = np.concatenate([rng.permutation([True] * 7 + [False] * 3) for _ in range(10)])
        assert kfold_accuracy(np.full(100, 0.3), labels).accuracy == pytest.approx(0.7)
        assert kfold_accuracy(np.full(100, 0.3), ~labels).accuracy == pytest.approx(0.7)

    def test_too_few_pairs(self):
        with pytest.raises(ValueError, match="at least 10"):
            kfold_accuracy(np.zeros(5), np.zeros(5, bool))

    def test_not_divisible(self):
        with pytest.raises(ValueError, match="divisible"):
            kfold_accuracy(np.zeros(15), np.zeros(15, bool))

    def test_best_threshold_brute_force(self, rng):
        for _ in range(30):
            scores = np.round(rng.uniform(-1, 1, 25), 1)
            same = rng.random(25) < 0.5
            thr, acc = best_threshold(scores, same)
            u = np.unique(scores)
            cands = [-np.inf, *((u[1:] + u[:-1]) / 2), np.inf]
            brute = max(np.mean((scores >= t) == same) for t in cands)
            assert acc == pytest.approx(brute)
            assert np.mean((scores >= thr) == same) == pytest.approx(acc)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 100_000))
    def test_pooled_accuracy_is_rank_only(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.random(100) < 0.5
        scores = rng.uniform(-1, 1, 100) + 0.5 * labels
        _, base = best_threshold(scores, labels)
        ranks = lambda s: np.argsort(np.argsort(s))  # noqa: E731
        for f in (np.tanh, lambda s: s ** 3, np.exp, ranks):
            assert best_threshold(np.asarray(f(scores), float), labels)[1] == base
        assert 0.0 <= base <= 1.0

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 100_000), a=st.sampled_from([0.5, 2.0, 4.0]), b=st.sampled_from([-1.0, 0.0, 3.0]))
    def test_affine_invariance(self, seed, a, b):
        rng = np.random.default_rng(seed)
        labels = rng.random(100) < 0.5
        scores = rng.uniform(-1, 1, 100) + 0.5 * labels
        assert kfold_accuracy(a * scores + b, labels).accuracy == kfold_accuracy(scores, labels).accuracy


@pytest.fixture(scope="module")
def toy_model():
    return build_model(scale_spec(get_spec("seesawfacenet-shuffle"), 0.25, 28), seed=1)


def _images(rng, n):
    return list(rng.integers(0, 256, (n, 28, 28, 3), dtype=np.uint8))


def test_duplicate_pairs_score_one(toy_model, rng):
    imgs = _images(rng, 10)
    report = evaluate_model(toy_model, PairSet([(im, im, True) for im in imgs]))
    np.testing.assert_allclose(report.scores, 1.0, atol=1e-12)
    assert report.accuracy == 1.0


def test_nearest_neighbour_pairset(toy_model, rng):
    imgs = _images(rng, 40)
    emb = l2_normalize(embed_images(toy_model, imgs).astype(np.float64))
    sim = emb @ emb.T
    np.fill_diagonal(sim, np.nan)
    pairs = []
    for i in range(40):
        pairs.append((imgs[i], imgs[int(np.nanargmax(sim[i]))], True))
        pairs.append((imgs[i], imgs[int(np.nanargmin(sim[i]))], False))
    assert evaluate_model(toy_model, PairSet(pairs)).accuracy >= 0.95


def test_pair_order_invariance(toy_model, rng):
    imgs = _images(rng, 30)
    labels = rng.random(30) < 0.5
    pairs = [(imgs[i], imgs[(i * 7 + 3) % 30], bool(labels[i])) for i in range(30)]
    a = evaluate_model(toy_model, PairSet(pairs))
    order = rng.permutation(30)
    b = evaluate_model(toy_model, PairSet([pairs[i] for i in order]))
    assert a.accuracy == b.accuracy
    assert a.thresholds == b.thresholds
    flipped = [(q, p, s) for p, q, s in pairs]
    assert evaluate_model(toy_model, PairSet(flipped)).accuracy == a.accuracy


def test_evaluate_too_few_pairs(toy_model, rng):
    imgs = _images(rng, 2)
    with pytest.raises(ValueError, match="at least 10"):
        evaluate_model(toy_model, PairSet([(imgs[0], imgs[1], True)] * 5))
