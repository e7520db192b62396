"""Prompt-pair labeling in a joint image/text embedding space.

An image gets label 1 when its embedding is strictly closer (cosine
distance) to the positive prompt than to the negative prompt.
"""
from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from fairstyle.core import ClassifierAdapter, adapter_lock
from fairstyle.errors import ConfigurationError


@dataclass(frozen=True)
class PromptPair:
    positive: str
    negative: str

    def __post_init__(self):
        if not self.positive.strip() or not self.negative.strip():
            raise ConfigurationError("prompts must be non-empty", field="prompts")
        if self.positive == self.negative:
            raise ConfigurationError("positive and negative prompts must differ", field="prompts")

    def swapped(self) -> "PromptPair":
        return PromptPair(self.negative, self.positive)

    def to_json(self) -> dict:
        return {"positive": self.positive, "negative": self.negative}


class EmbeddingBackend(abc.ABC):
    """Unit-norm image and text embeddings in one shared space."""

    concurrent_safe: bool = False

    @abc.abstractmethod
    def embed_images(self, images: np.ndarray) -> np.ndarray:
        """Shape (n, d), rows of unit L2 norm."""

    @abc.abstractmethod
    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        """Shape (k, d), rows of unit L2 norm."""


class ClipDecision(NamedTuple):
    label: int
    positive_distance: float
    negative_distance: float


def cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1 - <a, b> for unit vectors; broadcasts over leading axes."""
    return 1.0 - np.sum(a * b, axis=-1)


def _prompt_embeddings(backend: EmbeddingBackend, prompts: PromptPair) -> tuple[np.ndarray, np.ndarray]:
    with adapter_lock(backend):
        text = np.asarray(backend.embed_texts([prompts.positive, prompts.negative]), dtype=np.float64)
    return text[0], text[1]


def clip_distances(image_embeddings: np.ndarray, positive: np.ndarray,
                   negative: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return cosine_distance(image_embeddings, positive), cosine_distance(image_embeddings, negative)


def clip_label(backend: EmbeddingBackend, image: np.ndarray, prompts: PromptPair) -> ClipDecision:
    positive, negative = _prompt_embeddings(backend, prompts)
    with adapter_lock(backend):
        emb = np.asarray(backend.embed_images(np.asarray(image)[None]), dtype=np.float64)[0]
    d_pos, d_neg = clip_distances(emb, positive, negative)
    # ties go to 0: only a strictly closer positive prompt counts
    return ClipDecision(int(d_pos < d_neg), float(d_pos), float(d_neg))


def distance_score(d_pos, d_neg):
    """Two-way softmax over negative distances; > 0.5 exactly when d_pos < d_neg."""
    return expit(np.asarray(d_neg) - np.asarray(d_pos))


class ClipClassifier(ClassifierAdapter):
    """A prompt pair wrapped as a classifier usable by discovery, audit and debias."""

    def __init__(self, backend: EmbeddingBackend, prompts: PromptPair, name: str | None = None,
                 threshold: float = 0.5):
        self.backend = backend
        self.prompts = prompts
        self.name = name or prompts.positive
        self.threshold = threshold
        self.concurrent_safe = getattr(backend, "concurrent_safe", False)
        self._text = None

    def _texts(self):
        if self._text is None:
            self._text = _prompt_embeddings(self.backend, self.prompts)
        return self._text

    def scores(self, images):
        positive, negative = self._texts()
        with adapter_lock(self.backend):
            emb = np.asarray(self.backend.embed_images(images), dtype=np.float64)
        return distance_score(*clip_distances(emb, positive, negative))

    def decide(self, scores):
        # strict: a tie (score exactly 0.5) is label 0
        return (np.asarray(scores) > self.threshold).astype(np.uint8)


def as_classifier_adapter(backend: EmbeddingBackend, prompts: PromptPair,
                          name: str | None = None) -> ClipClassifier:
    return ClipClassifier(backend, prompts, name)


class TableBackend(EmbeddingBackend):
    """Deterministic backend with fixed text vectors; images embed as their normalized pixels.

    Handy for tests and for driving the pipeline without a real model.
    """

    concurrent_safe = True

    def __init__(self, texts: dict[str, Sequence[float]]):
        self._texts = {k: _unit(np.asarray(v, dtype=np.float64)) for k, v in texts.items()}

    def embed_images(self, images):
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        return flat / np.linalg.norm(flat, axis=1, keepdims=True)

    def embed_texts(self, texts):
        try:
            return np.stack([self._texts[t] for t in texts])
        except KeyError as exc:
            raise ConfigurationError(f"no embedding for prompt {exc.args[0]!r}") from None


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ConfigurationError("cannot normalize a zero embedding")
    return v / norm
