from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdpu.datamodel import (
    Article,
    DataConfig,
    FeatureBundle,
    IMDSample,
    LossWeights,
    PredictionSet,
    SplitSpec,
    ValidationError,
    split_dataset,
    validate_article,
    validate_imd_sample,
)

SMALL = DataConfig(max_text_len=128, image_size=8)


def art(i, label, size=8):
    return Article(f"a{i}", [1, 2, 3], np.full((size, size, 3), 0.5), label)


def corpus(n_real, n_fake):
    return [art(i, 0) for i in range(n_real)] + [art(n_real + i, 1) for i in range(n_fake)]


class TestSplit:
    def test_default_ratio(self):
        tr, va, te = split_dataset(corpus(50, 50), SplitSpec((0.7, 0.1, 0.2), seed=3))
        assert (len(tr), len(va), len(te)) == (70, 10, 20)

    def test_single_article(self):
        tr, va, te = split_dataset([art(0, 1)], SplitSpec())
        assert (len(tr), len(va), len(te)) == (1, 0, 0)

    def test_deterministic(self):
        data = corpus(5, 5)
        a = split_dataset(data, SplitSpec(seed=1))
        b = split_dataset(data, SplitSpec(seed=1))
        assert [[x.id for x in s] for s in a] == [[x.id for x in s] for s in b]

    def test_seed_changes_assignment(self):
        data = corpus(40, 40)
        a = split_dataset(data, SplitSpec(seed=1))[0]
        b = split_dataset(data, SplitSpec(seed=2))[0]
        assert {x.id for x in a} != {x.id for x in b}

    def test_errors(self):
        with pytest.raises(ValueError):
            split_dataset([], SplitSpec())
        with pytest.raises(ValueError):
            split_dataset([art(0, None)], SplitSpec())

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 60), st.integers(0, 60), st.integers(0, 1000))
    def test_partition_and_stratification(self, n_real, n_fake, seed):
        if n_real + n_fake == 0:
            return
        data = corpus(n_real, n_fake)
        ratios = (0.7, 0.1, 0.2)
        parts = split_dataset(data, SplitSpec(ratios, seed))
        ids = [a.id for p in parts for a in p]
        assert sorted(ids) == sorted(a.id for a in data)
        assert len(ids) == len(set(ids))
        n = len(data)
        for p, r in zip(parts, ratios):
            assert abs(len(p) - r * n) <= 1 + 1e-9
            counts = Counter(a.veracity for a in p)
            for cls, n_cls in ((0, n_real), (1, n_fake)):
                assert abs(counts[cls] - n_cls * len(p) / n) <= 1 + 1e-9

    def test_ratio_validation(self):
        with pytest.raises(ValidationError):
            SplitSpec((0.5, 0.5, 0.1))


class TestValidation:
    def test_valid_article_passes(self):
        a = art(0, 1)
        assert validate_article(a, SMALL) is a

    def test_pixel_out_of_range(self):
        img = np.full((8, 8, 3), 0.5)
        img[0, 0, 0] = 1.5
        with pytest.raises(ValidationError, match="image out of range") as exc:
            validate_article(Article("x", [1], img, 0), SMALL)
        assert exc.value.field == "image"

    def test_bad_label(self):
        with pytest.raises(ValidationError, match=r"label not in \{0,1\}"):
            validate_article(Article("x", [1], np.zeros((8, 8, 3)), 2), SMALL)

    def test_overlong_text(self):
        with pytest.raises(ValidationError, match="text"):
            validate_article(Article("x", list(range(1, 200)), np.zeros((8, 8, 3)), 0), SMALL)

    def test_empty_text(self):
        with pytest.raises(ValidationError, match="text"):
            validate_article(Article("x", [], np.zeros((8, 8, 3)), 0), SMALL)

    def test_wrong_size(self):
        with pytest.raises(ValidationError, match="image"):
            validate_article(Article("x", [1], np.zeros((9, 8, 3)), 0), SMALL)

    def test_unlabeled_allowed(self):
        validate_article(Article("x", [1], np.zeros((8, 8, 3)), None), SMALL)

    def test_imd_sample(self):
        validate_imd_sample(IMDSample(np.zeros((8, 8, 3)), 1), SMALL)
        with pytest.raises(ValidationError):
            validate_imd_sample(IMDSample(np.zeros((8, 8, 3)), 3), SMALL)

    def test_article_is_immutable(self):
        a = art(0, 0)
        with pytest.raises(ValueError):
            a.image[0, 0, 0] = 0.1


class TestTypes:
    def test_prediction_set(self):
        PredictionSet((0.25, 0.75), 0.0, 1.0)
        with pytest.raises(ValidationError):
            PredictionSet((0.3, 0.3), 0.5, 0.5)
        with pytest.raises(ValidationError):
            PredictionSet((0.5, 0.5), 1.5, 0.5)

    def test_loss_weights(self):
        assert LossWeights() == LossWeights(0.1, 0.1, 0.1)
        with pytest.raises(ValidationError):
            LossWeights(-1, 0, 0)
        with pytest.raises(ValidationError):
            LossWeights(float("inf"), 0, 0)

    def test_feature_bundle(self):
        v = np.ones(4)
        assert FeatureBundle(v, v, v, v, v).dim == 4
        with pytest.raises(ValidationError):
            FeatureBundle(v, v, v, np.ones(3))
        with pytest.raises(ValidationError):
            FeatureBundle(v, v, v, np.array([1, 1, 1, np.nan]))
