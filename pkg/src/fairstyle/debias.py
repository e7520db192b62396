"""Fit fairstyle tensors that push attribute distributions toward uniform.

The generator and classifiers are black boxes, so the optimizer takes
central finite differences of the batch loss. By default the gradient is
taken on a *soft* loss, where cells are accumulated from classifier scores,
because the hard-label KL is piecewise constant in the parameters. The
hard-label KL is what gets recorded, tested for convergence, and used to
pick the returned (best-so-far) parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from fairstyle.audit import empirical_distribution, kl_to_uniform, score_batch, soft_cells
from fairstyle.core import (
    AffineFairStyle,
    ChannelId,
    ChannelStats,
    ClassifierAdapter,
    DirectionFairStyle,
    FairStyleTensor,
    GeneratorAdapter,
    ScalarFairStyle,
    StyleCode,
    apply_fairstyle,
    check_address,
    derive_seed,
    generate_batch,
    sample_styles,
    synthesize,
)
from fairstyle.errors import ConfigurationError

FRESH = "fresh"
FIXED = "fixed"

CONVERGED = "converged"
MAX_ITERATIONS = "max-iterations"
DIVERGED = "diverged"


@dataclass(frozen=True)
class OptimizerConfig:
    batch_size: int = 128
    max_iterations: int = 500
    tolerance: float = 1e-3
    step: float = 0.05
    learning_rate: float = 1.0
    patience: int = 5
    converge_streak: int = 3
    batch_policy: str = FRESH
    smooth: bool = True
    stats_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.step <= 0:
            raise ConfigurationError("finite-difference step must be positive", field="step")
        if self.tolerance <= 0:
            raise ConfigurationError("tolerance must be positive", field="tolerance")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2", field="batch_size")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be at least 1", field="max_iterations")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive", field="learning_rate")
        if self.batch_policy not in (FRESH, FIXED):
            raise ConfigurationError(f"unknown batch policy {self.batch_policy!r}",
                                     field="batch_policy")
        if self.stats_samples < 2:
            raise ConfigurationError("stats_samples must be at least 2", field="stats_samples")

    def batch_seed(self, iteration: int) -> int:
        if self.batch_policy == FIXED:
            return derive_seed(self.seed, "batch")
        return derive_seed(self.seed, "batch", iteration)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    parameters: tuple[float, ...]
    cells: tuple[float, ...]
    kl: float
    objective: float
    learning_rate: float

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "parameters": list(self.parameters),
            "cells": list(self.cells),
            "kl": self.kl,
            "objective": self.objective,
            "learning_rate": self.learning_rate,
        }


@dataclass
class OptimizationTrace:
    attributes: tuple[str, ...]
    records: list[IterationRecord] = field(default_factory=list)
    status: str = MAX_ITERATIONS
    best_iteration: int | None = None

    @property
    def best(self) -> IterationRecord:
        return self.records[self.best_iteration]

    @property
    def initial_kl(self) -> float:
        return self.records[0].kl

    def to_json(self) -> dict:
        return {
            "attributes": list(self.attributes),
            "status": self.status,
            "best_iteration": self.best_iteration,
            "records": [r.to_json() for r in self.records],
        }


class DebiasResult(NamedTuple):
    tensor: FairStyleTensor
    trace: OptimizationTrace


class BatchObjective:
    """Losses of a parameter vector on one fixed batch of style codes."""

    def __init__(self, adapter: GeneratorAdapter, classifiers: Sequence[ClassifierAdapter],
                 build: Callable[[np.ndarray], FairStyleTensor], styles: StyleCode):
        self.adapter = adapter
        self.classifiers = list(classifiers)
        self.names = [c.name for c in self.classifiers]
        self.build = build
        self.styles = styles

    def scores(self, theta) -> np.ndarray:
        edited = apply_fairstyle(self.styles, self.build(np.asarray(theta, dtype=np.float64)))
        return score_batch(self.classifiers, synthesize(self.adapter, edited))

    def evaluate(self, theta) -> tuple[float, np.ndarray, float]:
        """Hard-label KL, hard cell probabilities and soft KL from one scoring pass."""
        scores = self.scores(theta)
        labels = np.stack([c.decide(scores[:, i]) for i, c in enumerate(self.classifiers)], axis=1)
        dist = empirical_distribution(labels, self.names)
        return kl_to_uniform(dist), dist.probabilities, kl_to_uniform(soft_cells(scores))

    def hard(self, theta) -> float:
        return self.evaluate(theta)[0]

    def soft(self, theta) -> float:
        return kl_to_uniform(soft_cells(self.scores(theta)))

    def loss(self, theta, smooth: bool) -> float:
        return self.soft(theta) if smooth else self.hard(theta)


def central_gradient(f: Callable[[np.ndarray], float], theta, h: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        down = theta.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (f(up) - f(down)) / (2 * h)
    return grad


def fairness_loss(adapter: GeneratorAdapter, classifiers: Sequence[ClassifierAdapter],
                  tensor: FairStyleTensor | None, n: int, seed: int, soft: bool = False) -> float:
    """KL to uniform of the joint label distribution of ``n`` edited samples."""
    batch = generate_batch(adapter, n, tensor, seed)
    scores = score_batch(classifiers, batch.images)
    if soft:
        return kl_to_uniform(soft_cells(scores))
    labels = np.stack([c.decide(scores[:, i]) for i, c in enumerate(classifiers)], axis=1)
    return kl_to_uniform(empirical_distribution(labels, [c.name for c in classifiers]))


def fairness_gradient(adapter: GeneratorAdapter, classifiers: Sequence[ClassifierAdapter],
                      build: Callable[[np.ndarray], FairStyleTensor], theta, n: int, seed: int,
                      h: float, smooth: bool = True) -> np.ndarray:
    """Central-difference gradient of the batch loss on one fixed batch."""
    styles, _ = sample_styles(adapter, n, seed)
    objective = BatchObjective(adapter, classifiers, build, styles)
    return central_gradient(lambda t: objective.loss(t, smooth), theta, h)


def compute_channel_stats(adapter: GeneratorAdapter, channel: ChannelId, n: int,
                          seed: int) -> ChannelStats:
    """Mean and unbiased std of one channel over ``n`` fresh style codes."""
    if n < 2:
        raise ConfigurationError("channel statistics need at least two samples", field="stats_samples")
    check_address(adapter.layers, channel)
    styles, _ = sample_styles(adapter, n, seed)
    return ChannelStats.from_values(channel, styles.channel(channel))


def optimize(adapter: GeneratorAdapter, classifiers: Sequence[ClassifierAdapter],
             build: Callable[[np.ndarray], FairStyleTensor], n_params: int,
             config: OptimizerConfig) -> DebiasResult:
    """Finite-difference gradient descent from zero on the fairness loss."""
    classifiers = list(classifiers)
    trace = OptimizationTrace(tuple(c.name for c in classifiers))
    theta = np.zeros(n_params)
    best_theta = theta.copy()
    best_kl = math.inf
    lr = config.learning_rate
    rises = 0
    streak = 0
    previous = None
    fixed_styles = None
    for it in range(config.max_iterations):
        if config.batch_policy == FIXED:
            if fixed_styles is None:
                fixed_styles, _ = sample_styles(adapter, config.batch_size, config.batch_seed(it))
            styles = fixed_styles
        else:
            styles, _ = sample_styles(adapter, config.batch_size, config.batch_seed(it))
        objective = BatchObjective(adapter, classifiers, build, styles)
        kl, cells, soft = objective.evaluate(theta)
        current = soft if config.smooth else kl
        trace.records.append(IterationRecord(it, tuple(theta.tolist()), tuple(cells.tolist()),
                                             kl, current, lr))
        if not (math.isfinite(kl) and math.isfinite(current)):
            trace.status = DIVERGED
            break
        if kl < best_kl:
            best_kl, best_theta = kl, theta.copy()
            trace.best_iteration = it
        streak = streak + 1 if kl < config.tolerance else 0
        if streak >= config.converge_streak:
            trace.status = CONVERGED
            break
        if previous is not None and current > previous:
            rises += 1
            if rises >= config.patience:
                lr /= 2
                rises = 0
        else:
            rises = 0
        previous = current
        grad = central_gradient(lambda t: objective.loss(t, config.smooth), theta, config.step)
        step = theta - lr * grad
        if not np.all(np.isfinite(step)):
            trace.status = DIVERGED
            break
        theta = step
    if trace.best_iteration is None:
        trace.best_iteration = 0
    return DebiasResult(build(best_theta), trace)


def optimize_single(adapter: GeneratorAdapter, classifier: ClassifierAdapter, channel: ChannelId,
                    config: OptimizerConfig = OptimizerConfig()) -> DebiasResult:
    """Scalar offset ``c`` on one channel, starting from 0."""
    check_address(adapter.layers, channel)
    return optimize(adapter, [classifier], lambda t: ScalarFairStyle(channel, float(t[0])), 1,
                    config)


def optimize_multi(adapter: GeneratorAdapter, classifiers: Sequence[ClassifierAdapter],
                   targets: Sequence[ChannelId], config: OptimizerConfig = OptimizerConfig(),
                   stats: Sequence[ChannelStats] | None = None) -> DebiasResult:
    """Cross-coupled bias over M >= 2 target channels, all 2M(M-1) parameters from 0.

    Channel statistics are computed once from ``config.stats_samples`` fresh
    codes (unless given) and stay frozen during the fit.
    """
    targets = tuple(targets)
    m = len(targets)
    if m < 2:
        raise ConfigurationError("joint debiasing needs at least two target channels")
    if len(classifiers) != m:
        raise ConfigurationError(f"{m} target channels but {len(classifiers)} classifiers")
    for t in targets:
        check_address(adapter.layers, t)
    if stats is None:
        seed = derive_seed(config.seed, "stats")
        styles, _ = sample_styles(adapter, config.stats_samples, seed)
        stats = tuple(ChannelStats.from_values(t, styles.channel(t)) for t in targets)
    stats = tuple(stats)
    return optimize(adapter, classifiers, lambda t: AffineFairStyle(targets, tuple(t), stats),
                    2 * m * (m - 1), config)


def optimize_text_direction(adapter: GeneratorAdapter, text_classifier: ClassifierAdapter,
                            direction, config: OptimizerConfig = OptimizerConfig()) -> DebiasResult:
    """Strength ``alpha`` of a fixed style direction, starting from 0."""
    probe = DirectionFairStyle(direction, 0.0)
    if not probe.direction or all(w == 0.0 for _, w in probe.direction):
        raise ConfigurationError("style direction is zero", field="direction")
    for ch in probe.targets:
        check_address(adapter.layers, ch)
    return optimize(adapter, [text_classifier],
                    lambda t: DirectionFairStyle(probe.direction, float(t[0])), 1, config)
