import numpy as np
import pytest
from scipy import optimize

from fairstyle.core import ChannelId, sample_styles
from fairstyle.discovery import (
    ChannelScore,
    DiscoveryConfig,
    find_controlling_channel,
    rank_scores,
    score_channel,
)
from fairstyle.errors import ConfigurationError
from fairstyle.synthgen import AttributeRule, SyntheticSpec, discovery_spec, make_synthetic, stylegan_layout

from conftest import PLANTED

SPURIOUS = ChannelId(3, 1)


def weighted_spec(weight):
    return SyntheticSpec(
        layers=tuple(stylegan_layout(7, 8)),
        attributes=(AttributeRule("glasses", PLANTED, 0.2, spurious=((SPURIOUS, weight),)),),
    )


def test_planted_score_matches_oracle(model):
    codes, _ = sample_styles(model.generator, 4096, 0)
    clf = model.classifiers["glasses"]
    score = score_channel(model.generator, clf, codes, PLANTED, 10.0).score
    expected = model.oracle.channel_effect("glasses", PLANTED, 10.0)
    assert expected == pytest.approx(1.0, abs=1e-6)
    assert score == pytest.approx(expected, abs=1e-3)


def test_noop_channel_scores_zero(model):
    codes, _ = sample_styles(model.generator, 128, 0)
    score = score_channel(model.generator, model.classifiers["glasses"], codes, ChannelId(3, 0), 10.0)
    assert score.score == 0.0


def test_sign_symmetry(model):
    codes, _ = sample_styles(model.generator, 128, 1)
    clf = model.classifiers["glasses"]
    a = score_channel(model.generator, clf, codes, PLANTED, 10.0).score
    b = score_channel(model.generator, clf, codes, PLANTED, -10.0).score
    assert a == b


def test_score_grows_with_perturbation(model):
    codes, _ = sample_styles(model.generator, 256, 2)
    clf = model.classifiers["glasses"]
    values = [score_channel(model.generator, clf, codes, PLANTED, c).score for c in (0.01, 0.1, 1.0)]
    assert values[0] < values[1] < values[2]


def test_planted_beats_calibrated_spurious():
    # spurious weight tuned so its expected effect is 0.4 against 1.0 for the planted channel
    weight = optimize.brentq(
        lambda w: make_synthetic(weighted_spec(w)).oracle.channel_effect("glasses", SPURIOUS, 10.0) - 0.4,
        1e-4, 1.0)
    model = make_synthetic(weighted_spec(weight))
    oracle = model.oracle
    assert oracle.channel_effect("glasses", PLANTED, 10.0) == pytest.approx(1.0, abs=0.01)
    for seed in range(5):
        result = find_controlling_channel(model.generator, model.classifiers["glasses"],
                                          DiscoveryConfig(seed=seed))
        assert result.channel == PLANTED
        by_channel = {s.channel: s.score for s in result.ranking}
        assert by_channel[SPURIOUS] == pytest.approx(0.4, abs=0.1)


@pytest.mark.parametrize("seed", range(5))
def test_random_specs(seed):
    spec = discovery_spec(np.random.default_rng(seed), n_blocks=7, width=16)
    model = make_synthetic(spec)
    rule = spec.attributes[0]
    result = find_controlling_channel(model.generator, model.classifiers[rule.name],
                                      DiscoveryConfig(seed=seed))
    assert result.channel == rule.channel


def test_excluded_layers_absent(model):
    config = DiscoveryConfig()
    result = find_controlling_channel(model.generator, model.classifiers["glasses"], config)
    layers = model.generator.layers
    seen = {s.channel.layer for s in result.ranking}
    last = max(l.block for l in layers)
    for i in seen:
        assert not layers[i].is_trgb
        assert layers[i].block <= last - 4
    assert len(result.ranking) == len(config.candidates(layers))


def test_excluded_channel_refused(model):
    codes, _ = sample_styles(model.generator, 4, 0)
    excluded = DiscoveryConfig().excluded_layers(model.generator.layers)
    with pytest.raises(ConfigurationError):
        score_channel(model.generator, model.classifiers["glasses"], codes, ChannelId(1, 0), 10.0,
                      excluded)


def test_all_excluded(model):
    with pytest.raises(ConfigurationError):
        find_controlling_channel(model.generator, model.classifiers["glasses"],
                                 DiscoveryConfig(exclude_last_blocks=10))


def test_workers_match_sequential(model):
    clf = model.classifiers["glasses"]
    a = find_controlling_channel(model.generator, clf, DiscoveryConfig(seed=3))
    b = find_controlling_channel(model.generator, clf, DiscoveryConfig(seed=3, workers=4))
    assert a == b


def test_ties_go_to_lowest_address():
    scores = [ChannelScore(ChannelId(2, 1), 0.5), ChannelScore(ChannelId(0, 7), 0.5),
              ChannelScore(ChannelId(0, 9), 0.1)]
    assert [s.channel for s in rank_scores(scores)] == [ChannelId(0, 7), ChannelId(2, 1), ChannelId(0, 9)]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        DiscoveryConfig(perturbation=0.0)
    with pytest.raises(ConfigurationError):
        DiscoveryConfig(batch_size=0)


def test_unsafe_adapter_is_serialized(model):
    import threading
    import time

    from fairstyle.core import GeneratorAdapter

    inner = model.generator

    class Unsafe(GeneratorAdapter):
        layers = inner.layers
        active = 0
        overlap = False
        guard = threading.Lock()

        def sample_latents(self, seeds):
            return inner.sample_latents(seeds)

        def styles(self, latents):
            return inner.styles(latents)

        def synthesize(self, code):
            with self.guard:
                self.active += 1
                self.overlap |= self.active > 1
            time.sleep(0.0005)
            with self.guard:
                self.active -= 1
            return inner.synthesize(code)

    gen = Unsafe()
    find_controlling_channel(gen, model.classifiers["glasses"], DiscoveryConfig(batch_size=8, workers=4))
    assert not gen.overlap
