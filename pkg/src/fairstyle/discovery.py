"""Find the style channel that most strongly controls an attribute.

Every candidate channel is pushed by ``-c`` and ``+c`` on the same batch of
style codes; its score is the mean absolute change in classifier score.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from fairstyle.core import (
    ChannelId,
    ClassifierAdapter,
    GeneratorAdapter,
    LayerInfo,
    StyleCode,
    check_address,
    sample_styles,
    synthesize,
)
from fairstyle.audit import score_batch
from fairstyle.errors import ConfigurationError


@dataclass(frozen=True)
class DiscoveryConfig:
    batch_size: int = 128
    perturbation: float = 10.0
    exclude_trgb: bool = True
    exclude_last_blocks: int = 4
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1", field="batch_size")
        if self.perturbation == 0:
            raise ConfigurationError("perturbation must be non-zero", field="perturbation")
        if self.exclude_last_blocks < 0:
            raise ConfigurationError("exclude_last_blocks must be >= 0", field="exclude_last_blocks")

    def excluded_layers(self, layers: Sequence[LayerInfo]) -> frozenset[int]:
        last = max(l.block for l in layers)
        cutoff = last - self.exclude_last_blocks
        return frozenset(
            i for i, l in enumerate(layers)
            if (self.exclude_trgb and l.is_trgb) or l.block > cutoff
        )

    def candidates(self, layers: Sequence[LayerInfo]) -> list[ChannelId]:
        excluded = self.excluded_layers(layers)
        return [ChannelId(i, j) for i, l in enumerate(layers) if i not in excluded
                for j in range(l.width)]


@dataclass(frozen=True, order=True)
class ChannelScore:
    channel: ChannelId
    score: float

    def to_json(self) -> dict:
        return {**self.channel.to_json(), "score": self.score}


@dataclass(frozen=True)
class DiscoveryResult:
    channel: ChannelId
    ranking: tuple[ChannelScore, ...]

    def to_json(self) -> dict:
        return {
            "channel": self.channel.to_json(),
            "ranking": [s.to_json() for s in self.ranking],
        }


def _perturbed(codes: StyleCode, channel: ChannelId, delta: float) -> StyleCode:
    return codes.with_offsets({channel: delta})


def score_channel(adapter: GeneratorAdapter, classifier: ClassifierAdapter, codes: StyleCode,
                  channel: ChannelId, c: float,
                  excluded: Iterable[int] = ()) -> ChannelScore:
    """Mean |C(G(s - c e)) - C(G(s + c e))| over the batch ``codes``."""
    if not codes.is_batch or len(codes) == 0:
        raise ConfigurationError("score_channel needs a non-empty batch of style codes")
    check_address(codes.layers, channel)
    if channel.layer in set(excluded):
        raise ConfigurationError(f"channel {channel} lies in an excluded layer")
    minus = score_batch([classifier], synthesize(adapter, _perturbed(codes, channel, -c)))[:, 0]
    plus = score_batch([classifier], synthesize(adapter, _perturbed(codes, channel, c)))[:, 0]
    return ChannelScore(channel, float(np.mean(np.abs(minus - plus))))


def rank_scores(scores: Iterable[ChannelScore]) -> tuple[ChannelScore, ...]:
    """Highest score first; ties go to the lower (layer, channel)."""
    return tuple(sorted(scores, key=lambda s: (-s.score, s.channel)))


def find_controlling_channel(adapter: GeneratorAdapter, classifier: ClassifierAdapter,
                             config: DiscoveryConfig = DiscoveryConfig()) -> DiscoveryResult:
    layers = adapter.layers
    candidates = config.candidates(layers)
    if not candidates:
        raise ConfigurationError("every style channel is excluded from the search")
    excluded = config.excluded_layers(layers)
    codes, _ = sample_styles(adapter, config.batch_size, config.seed)

    def run(channel):
        return score_channel(adapter, classifier, codes, channel, config.perturbation, excluded)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            scores = list(pool.map(run, candidates))
    else:
        scores = [run(ch) for ch in candidates]
    ranking = rank_scores(scores)
    return DiscoveryResult(ranking[0].channel, ranking)
