import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairstyle.core import (
    AffineFairStyle,
    ChannelId,
    ChannelStats,
    GeneratorAdapter,
    LayerInfo,
    ScalarFairStyle,
    StyleCode,
    multi_bias,
    pair_bias,
    pair_params_to_flat,
    sample_styles,
)
from fairstyle.debias import (
    CONVERGED,
    FIXED,
    OptimizerConfig,
    compute_channel_stats,
    fairness_gradient,
    fairness_loss,
    optimize_multi,
    optimize_single,
    optimize_text_direction,
)
from fairstyle.errors import ConfigurationError, DegenerateChannelError
from fairstyle.synthgen import AttributeRule, SyntheticSpec, coupled_pair_spec, make_synthetic, stylegan_layout

from conftest import PLANTED, biased_spec


class TwoPoint(GeneratorAdapter):
    """Every odd seed has value 1 on channel (0, 0), every even seed 3."""

    layers = (LayerInfo(2, 0),)

    def sample_latents(self, seeds):
        return np.asarray(seeds, dtype=float)[:, None]

    def styles(self, latents):
        first = np.where(latents[:, 0] % 2 == 1, 1.0, 3.0)
        return StyleCode([np.stack([first, np.full_like(first, 5.0)], axis=1)], self.layers)

    def synthesize(self, code):
        return np.stack(code.values, axis=1)


class TestLoss:
    def test_biased_glasses(self, model):
        value = fairness_loss(model.generator, [model.classifiers["glasses"]], None, 20000, seed=0)
        assert value == pytest.approx(0.1927, abs=0.01)

    def test_balanced_glasses(self, model):
        tensor = ScalarFairStyle(PLANTED, model.oracle.balancing_offset("glasses"))
        value = fairness_loss(model.generator, [model.classifiers["glasses"]], tensor, 20000, seed=0)
        assert value < 2e-3

    def test_soft_loss_is_smooth_in_offset(self, model):
        clf = [model.classifiers["glasses"]]
        values = [fairness_loss(model.generator, clf, ScalarFairStyle(PLANTED, c), 512, seed=1, soft=True)
                  for c in np.linspace(0.0, 0.8, 5)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestStats:
    def test_two_point_channel(self):
        gen = TwoPoint()
        seeds_checked = sample_styles(gen, 2000, 0)[0].channel(ChannelId(0, 0))
        stats = compute_channel_stats(gen, ChannelId(0, 0), 2000, 0)
        assert stats.mean == pytest.approx(np.mean(seeds_checked), abs=1e-12)
        assert stats.std == pytest.approx(np.std(seeds_checked, ddof=1), rel=1e-12)
        assert stats.sample_count == 2000

    def test_exact_pair(self):
        stats = ChannelStats.from_values(ChannelId(0, 0), [1.0, 3.0])
        assert (stats.mean, stats.std) == (2.0, pytest.approx(math.sqrt(2.0)))

    def test_constant_channel(self):
        with pytest.raises(DegenerateChannelError):
            compute_channel_stats(TwoPoint(), ChannelId(0, 1), 100, 0)

    def test_too_few_samples(self):
        with pytest.raises(ConfigurationError):
            compute_channel_stats(TwoPoint(), ChannelId(0, 0), 1, 0)


class TestCouplingArithmetic:
    layers = (LayerInfo(4, 0),)
    targets = (ChannelId(0, 0), ChannelId(0, 1))

    def code(self, s1, s2):
        return StyleCode([np.array([s1, s2, 0.0, 0.0])], self.layers)

    def stats(self, m1=1.0, sd1=2.0, m2=-1.0, sd2=0.5):
        return (ChannelStats(self.targets[0], m1, sd1, 100), ChannelStats(self.targets[1], m2, sd2, 100))

    def test_pair_example(self):
        bias = pair_bias(self.code(3.0, 0.0), self.targets,
                         {"x1": 2.0, "y1": 0.5, "x2": -1.0, "y2": 0.25}, self.stats())
        # b1 = x2 * (0 - (-1)) / 0.5 + y2 ; b2 = x1 * (3 - 1) / 2 + y1
        assert bias[self.targets[0]] == -2.0 + 0.25
        assert bias[self.targets[1]] == 2.0 + 0.5

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=6, max_size=6))
    def test_pair_matches_multi(self, v):
        x1, y1, x2, y2, s1, s2 = v
        code = self.code(s1, s2)
        named = pair_bias(code, self.targets, {"x1": x1, "y1": y1, "x2": x2, "y2": y2}, self.stats())
        flat = multi_bias(code, self.targets, pair_params_to_flat(x1, y1, x2, y2), self.stats())
        for t in self.targets:
            assert flat[t] == pytest.approx(named[t], rel=1e-12, abs=1e-12)

    def test_three_target_example(self):
        targets = (ChannelId(0, 0), ChannelId(0, 1), ChannelId(0, 2))
        code = StyleCode([np.array([1.0, 2.0, 3.0, 0.0])], self.layers)
        stats = tuple(ChannelStats(t, 0.0, 1.0, 10) for t in targets)
        params = np.arange(12, dtype=float)
        bias = multi_bias(code, targets, params, stats)
        # target 0 <- (1, 2): 0*2+1 + 2*3+3 ; target 1 <- (0, 2): 4*1+5 + 6*3+7 ; target 2 <- (0, 1): 8*1+9 + 10*2+11
        assert [bias[t] for t in targets] == [10.0, 34.0, 48.0]

    def test_cardinality(self):
        with pytest.raises(ConfigurationError):
            multi_bias(self.code(0, 0), self.targets, np.zeros(5), self.stats())


def test_gradient_matches_independent_difference(model):
    clf = model.classifiers["glasses"]
    build = lambda t: ScalarFairStyle(PLANTED, float(t[0]))
    theta, h, n = np.array([0.3]), 0.05, 256
    grad = fairness_gradient(model.generator, [clf], build, theta, n, seed=4, h=h)
    styles, _ = sample_styles(model.generator, n, 4)

    def soft(c):
        edited = styles.with_offsets({PLANTED: c})
        p = np.mean(clf.scores(model.generator.synthesize(edited)))
        return p * math.log(2 * p) + (1 - p) * math.log(2 * (1 - p))

    manual = (soft(theta[0] + h) - soft(theta[0] - h)) / (2 * h)
    assert grad[0] == pytest.approx(manual, rel=1e-8)


def test_single_attribute_reaches_balance(model):
    config = OptimizerConfig(batch_size=4096, tolerance=1e-3, seed=1)
    result = optimize_single(model.generator, model.classifiers["glasses"], PLANTED, config)
    c_star = model.oracle.balancing_offset("glasses")
    assert result.trace.status == CONVERGED
    assert result.tensor.c == pytest.approx(c_star, rel=0.15)
    assert result.trace.best.kl <= result.trace.initial_kl
    assert result.trace.initial_kl == pytest.approx(0.1927, abs=0.02)


def test_already_fair_stays_near_zero():
    model = make_synthetic(biased_spec(base_rate=0.5))
    config = OptimizerConfig(batch_size=4096, seed=2)
    result = optimize_single(model.generator, model.classifiers["glasses"], PLANTED, config)
    assert abs(result.tensor.c) < 0.1
    assert result.trace.best_iteration <= 3


def test_fixed_batch_policy_reuses_batch(model):
    config = OptimizerConfig(batch_size=2048, batch_policy=FIXED, max_iterations=20, seed=3)
    assert config.batch_seed(0) == config.batch_seed(7)
    result = optimize_single(model.generator, model.classifiers["glasses"], PLANTED, config)
    assert result.trace.best.kl < result.trace.initial_kl


def test_text_direction_equals_single(model):
    clf = model.classifiers["glasses"]
    config = OptimizerConfig(batch_size=1024, max_iterations=15, seed=5)
    single = optimize_single(model.generator, clf, PLANTED, config)
    text = optimize_text_direction(model.generator, clf, {PLANTED: 1.0}, config)
    assert [r.parameters for r in single.trace.records] == [r.parameters for r in text.trace.records]
    assert [r.kl for r in single.trace.records] == [r.kl for r in text.trace.records]


def test_zero_direction_refused(model):
    with pytest.raises(ConfigurationError):
        optimize_text_direction(model.generator, model.classifiers["glasses"], {PLANTED: 0.0})


def test_joint_debias_flattens_cells():
    spec = coupled_pair_spec([0.45, 0.35, 0.15, 0.05])
    model = make_synthetic(spec)
    clfs = [model.classifiers["a"], model.classifiers["b"]]
    targets = [r.channel for r in spec.attributes]
    result = optimize_multi(model.generator, clfs, targets, OptimizerConfig(batch_size=2048, seed=6))
    assert isinstance(result.tensor, AffineFairStyle)
    assert len(result.tensor.parameters) == 4
    cells = model.oracle.joint_cells("a", "b")
    assert result.trace.initial_kl == pytest.approx(
        sum(p * math.log(4 * p) for p in cells), abs=0.03)
    assert result.trace.best.kl < 5e-3


def test_multi_requires_matching_counts(model):
    with pytest.raises(ConfigurationError):
        optimize_multi(model.generator, [model.classifiers["glasses"]], [PLANTED, ChannelId(3, 0)])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        OptimizerConfig(step=0)
    with pytest.raises(ConfigurationError):
        OptimizerConfig(batch_policy="sometimes")
