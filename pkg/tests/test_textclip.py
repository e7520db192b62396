import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairstyle.audit import label_batch
from fairstyle.errors import ConfigurationError
from fairstyle.textclip import (
    ClipClassifier,
    EmbeddingBackend,
    PromptPair,
    TableBackend,
    clip_label,
    cosine_distance,
    distance_score,
)

PROMPTS = PromptPair("a photo of a person with glasses", "a photo of a person without glasses")


class Mock(EmbeddingBackend):
    def __init__(self, positive, negative, rotation=None):
        self.rotation = np.eye(len(positive)) if rotation is None else rotation
        self.table = {PROMPTS.positive: np.asarray(positive, float),
                      PROMPTS.negative: np.asarray(negative, float)}

    def embed_images(self, images):
        return np.asarray(images, float) @ self.rotation.T

    def embed_texts(self, texts):
        return np.stack([self.table[t] for t in texts]) @ self.rotation.T


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def test_worked_example():
    backend = Mock([0.6, 0.8], [0.0, 1.0])
    decision = clip_label(backend, np.array([1.0, 0.0]), PROMPTS)
    assert decision.positive_distance == pytest.approx(0.4, abs=1e-15)
    assert decision.negative_distance == pytest.approx(1.0, abs=1e-15)
    assert decision.label == 1
    clf = ClipClassifier(backend, PROMPTS)
    score = clf.scores(np.array([[1.0, 0.0]]))
    assert score[0] > 0.5
    assert label_batch([clf], np.array([[1.0, 0.0]]))[0, 0] == 1


def test_tie_is_negative():
    backend = Mock([1.0, 0.0], [0.0, 1.0])
    image = unit([1.0, 1.0])
    assert clip_label(backend, image, PROMPTS).label == 0
    clf = ClipClassifier(backend, PROMPTS)
    assert label_batch([clf], image[None])[0, 0] == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_classifier_matches_direct_rule(seed):
    rng = np.random.default_rng(seed)
    dim = 5
    pos, neg = unit(rng.normal(size=dim)), unit(rng.normal(size=dim))
    images = rng.normal(size=(30, dim))
    images /= np.linalg.norm(images, axis=1, keepdims=True)
    clf = ClipClassifier(Mock(pos, neg), PROMPTS)
    expected = [int(cosine_distance(x, pos) < cosine_distance(x, neg)) for x in images]
    assert label_batch([clf], images)[:, 0].tolist() == expected


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    pos, neg = unit(rng.normal(size=4)), unit(rng.normal(size=4))
    images = rng.normal(size=(20, 4))
    images /= np.linalg.norm(images, axis=1, keepdims=True)
    plain = label_batch([ClipClassifier(Mock(pos, neg), PROMPTS)], images)
    rotated = label_batch([ClipClassifier(Mock(pos, neg, q), PROMPTS)], images)
    assert np.array_equal(plain, rotated)


def test_swapped_prompts_flip_labels():
    rng = np.random.default_rng(3)
    backend = Mock(unit([1, 2, 0]), unit([0, 1, 1]))
    images = rng.normal(size=(200, 3))
    images /= np.linalg.norm(images, axis=1, keepdims=True)
    a = label_batch([ClipClassifier(backend, PROMPTS)], images)[:, 0]
    b = label_batch([ClipClassifier(backend, PROMPTS.swapped())], images)[:, 0]
    assert np.array_equal(a, 1 - b)


def test_distance_score_monotone():
    assert distance_score(0.2, 0.9) > 0.5 > distance_score(0.9, 0.2)
    assert distance_score(0.5, 0.5) == 0.5


def test_prompt_validation():
    with pytest.raises(ConfigurationError):
        PromptPair("same", "same")
    with pytest.raises(ConfigurationError):
        PromptPair("", "x")


def test_table_backend():
    backend = TableBackend({"pos": [1.0, 0.0, 0.0, 0.0], "neg": [0.0, 1.0, 0.0, 0.0]})
    clf = ClipClassifier(backend, PromptPair("pos", "neg"), name="g")
    images = np.array([[[2.0, 0.0], [0.0, 0.0]], [[0.0, 3.0], [0.0, 0.0]]])
    assert label_batch([clf], images)[:, 0].tolist() == [1, 0]
    with pytest.raises(ConfigurationError):
        ClipClassifier(backend, PromptPair("pos", "other")).scores(images)
