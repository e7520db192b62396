"""Synthetic generator/classifier pair with planted channel->attribute structure.

Every style channel is an independent Gaussian. Each attribute reads a
*feature*: its causal channel plus small weighted "spurious" channels. The
generator writes the features into the first pixels of a tiny image (the
remaining pixels hold per-layer means, which no classifier reads). A
classifier scores ``expit(slope * (feature - threshold))``; an optional
coupling subtracts ``strength * z`` from the feature, where ``z`` is the
standardized feature of a source attribute, which plants a joint bias.

Because everything is linear-Gaussian up to the final threshold, the
:class:`Oracle` answers base rates, balancing offsets, channel effects and
joint cells in closed form (or by 1-D quadrature).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import integrate, optimize
from scipy.special import expit, ndtri
from scipy.stats import norm

from fairstyle.core import (
    CONV,
    TRGB,
    ChannelId,
    ClassifierAdapter,
    GeneratorAdapter,
    LayerInfo,
    StyleCode,
    check_address,
)
from fairstyle.errors import ConfigurationError

EXCLUDED_LAST_BLOCKS = 4


def stylegan_layout(n_blocks: int, width: int | Sequence[int]) -> list[LayerInfo]:
    """S-space layout: block 0 has one conv + tRGB, later blocks two convs + tRGB."""
    widths = [width] * n_blocks if isinstance(width, int) else list(width)
    if len(widths) != n_blocks:
        raise ConfigurationError("need one width per block")
    layers = []
    for block, w in enumerate(widths):
        convs = 1 if block == 0 else 2
        layers += [LayerInfo(w, block, CONV)] * convs + [LayerInfo(w, block, TRGB)]
    return layers


@dataclass(frozen=True)
class Coupling:
    source: str
    strength: float


@dataclass(frozen=True)
class AttributeRule:
    name: str
    channel: ChannelId
    base_rate: float
    slope: float = 4.0
    spurious: tuple[tuple[ChannelId, float], ...] = ()
    coupling: Coupling | None = None

    def to_json(self) -> dict:
        out = {
            "name": self.name,
            "channel": self.channel.to_json(),
            "base_rate": self.base_rate,
            "slope": self.slope,
            "spurious": [{**ch.to_json(), "weight": w} for ch, w in self.spurious],
        }
        if self.coupling is not None:
            out["coupling"] = {"source": self.coupling.source, "strength": self.coupling.strength}
        return out

    @classmethod
    def from_json(cls, obj) -> "AttributeRule":
        coupling = obj.get("coupling")
        return cls(
            name=obj["name"],
            channel=ChannelId.from_json(obj["channel"]),
            base_rate=float(obj["base_rate"]),
            slope=float(obj.get("slope", 4.0)),
            spurious=tuple((ChannelId.from_json(s), float(s["weight"]))
                           for s in obj.get("spurious", [])),
            coupling=Coupling(coupling["source"], float(coupling["strength"])) if coupling else None,
        )


@dataclass(frozen=True)
class SyntheticSpec:
    layers: tuple[LayerInfo, ...]
    attributes: tuple[AttributeRule, ...]
    style_mean: float = 0.0
    style_std: float = 1.0
    constant_channels: tuple[ChannelId, ...] = ()
    image_size: int = 8
    excluded_last_blocks: int = EXCLUDED_LAST_BLOCKS

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "constant_channels", tuple(self.constant_channels))

    def attribute(self, name: str) -> AttributeRule:
        for rule in self.attributes:
            if rule.name == name:
                return rule
        raise ConfigurationError(f"unknown attribute {name!r}", field="attributes")

    def to_json(self) -> dict:
        return {
            "layers": [{"width": l.width, "block": l.block, "kind": l.kind} for l in self.layers],
            "attributes": [a.to_json() for a in self.attributes],
            "style_mean": self.style_mean,
            "style_std": self.style_std,
            "constant_channels": [c.to_json() for c in self.constant_channels],
            "image_size": self.image_size,
            "excluded_last_blocks": self.excluded_last_blocks,
        }

    @classmethod
    def from_json(cls, obj) -> "SyntheticSpec":
        try:
            return cls(
                layers=tuple(LayerInfo(int(l["width"]), int(l["block"]), l.get("kind", CONV))
                             for l in obj["layers"]),
                attributes=tuple(AttributeRule.from_json(a) for a in obj["attributes"]),
                style_mean=float(obj.get("style_mean", 0.0)),
                style_std=float(obj.get("style_std", 1.0)),
                constant_channels=tuple(ChannelId.from_json(c)
                                        for c in obj.get("constant_channels", [])),
                image_size=int(obj.get("image_size", 8)),
                excluded_last_blocks=int(obj.get("excluded_last_blocks", EXCLUDED_LAST_BLOCKS)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed synthetic spec: {exc}") from exc

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        return cls.from_json(json.loads(Path(path).read_text()))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def validate_spec(spec: SyntheticSpec) -> None:
    layers = spec.layers
    if not layers:
        raise ConfigurationError("synthetic spec has no layers", field="layers")
    if not spec.attributes:
        raise ConfigurationError("synthetic spec has no attributes", field="attributes")
    if spec.style_std <= 0:
        raise ConfigurationError("style_std must be positive", field="style_std")
    if spec.image_size ** 2 < len(spec.attributes):
        raise ConfigurationError("image too small to hold every attribute", field="image_size")
    last_block = max(l.block for l in layers)
    late = last_block - spec.excluded_last_blocks
    names = [a.name for a in spec.attributes]
    if len(set(names)) != len(names):
        raise ConfigurationError("attribute names must be unique", field="attributes")
    constant = set(spec.constant_channels)
    for ch in constant:
        check_address(layers, ch)
    used: dict[ChannelId, str] = {}
    for rule in spec.attributes:
        check_address(layers, rule.channel)
        info = layers[rule.channel.layer]
        if info.is_trgb:
            raise ConfigurationError(f"{rule.name}: causal channel is in a tRGB layer")
        if info.block > late:
            raise ConfigurationError(
                f"{rule.name}: causal channel lies in the last {spec.excluded_last_blocks} blocks")
        if rule.channel in constant:
            raise ConfigurationError(f"{rule.name}: causal channel is constant")
        if not 0.0 < rule.base_rate < 1.0:
            raise ConfigurationError(f"{rule.name}: base rate must lie in (0, 1)")
        if rule.slope <= 0:
            raise ConfigurationError(f"{rule.name}: slope must be positive")
        for ch in [rule.channel, *(c for c, _ in rule.spurious)]:
            check_address(layers, ch)
            if ch in used:
                raise ConfigurationError(
                    f"channel {ch} feeds both {used[ch]} and {rule.name}; features must be disjoint")
            used[ch] = rule.name
    for rule in spec.attributes:
        if rule.coupling is None:
            continue
        source = spec.attribute(rule.coupling.source)
        if source.name == rule.name:
            raise ConfigurationError(f"{rule.name}: attribute cannot couple to itself")
        if source.coupling is not None:
            raise ConfigurationError(f"{rule.name}: coupling source must itself be uncoupled")


class _Feature(NamedTuple):
    mean: float
    std: float


class Oracle:
    """Closed-form answers about a :class:`SyntheticSpec`."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self._constant = set(spec.constant_channels)
        self._thresholds = {}
        for rule in spec.attributes:
            w = self._latent(rule.name)
            self._thresholds[rule.name] = w.mean + w.std * norm.isf(rule.base_rate)

    def _channel_std(self, ch: ChannelId) -> float:
        return 0.0 if ch in self._constant else self.spec.style_std

    def feature(self, name: str) -> _Feature:
        """Mean and std of an attribute's (unedited) feature pixel."""
        rule = self.spec.attribute(name)
        terms = [(rule.channel, 1.0), *rule.spurious]
        mean = sum(w * self.spec.style_mean for _, w in terms)
        var = sum((w * self._channel_std(ch)) ** 2 for ch, w in terms)
        return _Feature(mean, math.sqrt(var))

    def _latent(self, name: str) -> _Feature:
        """Distribution of the quantity compared against the threshold."""
        rule = self.spec.attribute(name)
        own = self.feature(name)
        if rule.coupling is None:
            return own
        return _Feature(own.mean, math.hypot(own.std, rule.coupling.strength))

    def threshold(self, name: str) -> float:
        return self._thresholds[name]

    def logit_coefficients(self, name: str) -> dict[ChannelId, float]:
        """d(feature - coupling term)/d(channel) for every channel the classifier sees."""
        rule = self.spec.attribute(name)
        coef = {rule.channel: 1.0, **dict(rule.spurious)}
        if rule.coupling is not None:
            src = self.spec.attribute(rule.coupling.source)
            scale = rule.coupling.strength / self.feature(src.name).std
            for ch, w in [(src.channel, 1.0), *src.spurious]:
                coef[ch] = coef.get(ch, 0.0) - scale * w
        return coef

    def base_rate(self, name: str) -> float:
        return self.label_rate(name, 0.0)

    def label_rate(self, name: str, offset: float) -> float:
        """P(label = 1) after adding ``offset`` to the attribute's causal channel."""
        w = self._latent(name)
        return float(norm.sf((self.threshold(name) - w.mean - offset) / w.std))

    def balancing_offset(self, name: str) -> float:
        """Scalar offset on the causal channel that makes the label rate exactly 0.5."""
        return self.threshold(name) - self._latent(name).mean

    def channel_effect(self, name: str, channel: ChannelId, c: float) -> float:
        """Expected |score(s - c e) - score(s + c e)| for a perturbation of one channel."""
        rule = self.spec.attribute(name)
        a = self.logit_coefficients(name).get(channel, 0.0)
        if a == 0.0:
            return 0.0
        w = self._latent(name)
        k = rule.slope
        shift = k * a * c
        centre = k * (w.mean - self.threshold(name))
        spread = k * w.std

        def integrand(z):
            u = centre + spread * z
            return abs(expit(u - shift) - expit(u + shift)) * norm.pdf(z)

        value, _ = integrate.quad(integrand, -12.0, 12.0, limit=200,
                                  points=[-centre / spread], epsabs=1e-12, epsrel=1e-10)
        return float(value)

    def joint_cells(self, first: str, second: str, offsets: Sequence[float] = (0.0, 0.0)) -> np.ndarray:
        """Joint label probabilities in cell order 00, 01, 10, 11 (first attribute major)."""
        r1 = self.spec.attribute(first)
        r2 = self.spec.attribute(second)
        if r1.coupling is not None and r1.coupling.source == second:
            return self.joint_cells(second, first, offsets[::-1])[[0, 2, 1, 3]]
        p1 = self.label_rate(first, offsets[0])
        if r2.coupling is None or r2.coupling.source != first:
            p2 = self.label_rate(second, offsets[1])
            return np.array([(1 - p1) * (1 - p2), (1 - p1) * p2, p1 * (1 - p2), p1 * p2])
        f1 = self.feature(first)
        f2 = self.feature(second)
        kappa = r2.coupling.strength
        t1 = (self.threshold(first) - f1.mean - offsets[0]) / f1.std
        # the coupled classifier standardizes the edited source feature with unedited moments
        cut2 = self.threshold(second) - offsets[1] + kappa * offsets[0] / f1.std - f2.mean

        def joint_density(z):
            return norm.pdf(z) * norm.sf((cut2 + kappa * z) / f2.std)

        p11, _ = integrate.quad(joint_density, t1, np.inf, epsabs=1e-13, epsrel=1e-11)
        p01, _ = integrate.quad(joint_density, -np.inf, t1, epsabs=1e-13, epsrel=1e-11)
        p10 = p1 - p11
        return np.array([1 - p1 - p01, p01, p10, p11])

    def decorrelating_params(self, first: str, second: str) -> dict[str, float]:
        """Exact pair-coupling parameters that make (first, second) jointly uniform.

        Valid when ``second`` is coupled to ``first`` (or they are independent)
        and ``first`` has no spurious channels. Uses the true channel moments,
        targets ordered (first causal channel, second causal channel).
        """
        r1 = self.spec.attribute(first)
        r2 = self.spec.attribute(second)
        if r1.spurious:
            raise ConfigurationError("decorrelating parameters need a spurious-free source")
        if r1.coupling is not None:
            raise ConfigurationError(f"{first} must be the coupling source, not the coupled side")
        y2 = self.balancing_offset(first)
        if r2.coupling is None or r2.coupling.source != first:
            return {"x1": 0.0, "y1": self.balancing_offset(second), "x2": 0.0, "y2": y2}
        kappa = r2.coupling.strength
        sigma1 = self.feature(first).std
        y1 = self.threshold(second) - self.feature(second).mean + kappa * y2 / sigma1
        return {"x1": kappa, "y1": y1, "x2": 0.0, "y2": y2}

    def summary(self) -> dict:
        out = {}
        for rule in self.spec.attributes:
            out[rule.name] = {
                "channel": rule.channel.to_json(),
                "base_rate": self.base_rate(rule.name),
                "balancing_offset": self.balancing_offset(rule.name),
                "threshold": self.threshold(rule.name),
            }
        return out


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def hashed_normals(seeds, dim: int) -> np.ndarray:
    """Standard normals, entry (k, d) a pure function of (seeds[k], d).

    Counter-based so a batch costs one vectorized pass instead of one RNG
    construction per sample.
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    with np.errstate(over="ignore"):
        keys = _splitmix64(seeds[:, None] * np.uint64(0x100000001B3))
        bits = _splitmix64(keys ^ np.arange(dim, dtype=np.uint64)[None, :])
    uniform = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(uniform)


class SyntheticGenerator(GeneratorAdapter):
    concurrent_safe = True

    def __init__(self, spec: SyntheticSpec, oracle: Oracle):
        self.spec = spec
        self._layers = spec.layers
        self._bounds = np.cumsum([0] + [l.width for l in spec.layers])
        self._std = np.full(self._bounds[-1], spec.style_std)
        for ch in spec.constant_channels:
            self._std[self._bounds[ch.layer] + ch.channel] = 0.0
        self._features = [
            [(rule.channel, 1.0), *rule.spurious] for rule in spec.attributes
        ]

    @property
    def layers(self):
        return self._layers

    def sample_latents(self, seeds):
        return hashed_normals(seeds, int(self._bounds[-1]))

    def styles(self, latents):
        flat = self.spec.style_mean + self._std * np.asarray(latents)
        return StyleCode(np.split(flat, self._bounds[1:-1], axis=1), self._layers)

    def synthesize(self, code):
        n = len(code)
        size = self.spec.image_size
        pixels = np.empty((n, size * size))
        m = len(self._features)
        for t, terms in enumerate(self._features):
            value = 0.0
            for ch, w in terms:
                value = value + w * code.values[ch.layer][:, ch.channel]
            pixels[:, t] = value
        means = np.stack([v.mean(axis=1) for v in code.values], axis=1)
        rest = np.arange(size * size - m) % means.shape[1]
        pixels[:, m:] = means[:, rest]
        return pixels.reshape(n, size, size)


class SyntheticClassifier(ClassifierAdapter):
    concurrent_safe = True

    def __init__(self, spec: SyntheticSpec, oracle: Oracle, name: str, threshold: float = 0.5):
        self.name = name
        self.threshold = threshold
        names = [a.name for a in spec.attributes]
        rule = spec.attribute(name)
        self._pixel = names.index(name)
        self._slope = rule.slope
        self._cut = oracle.threshold(name)
        self._source = None
        if rule.coupling is not None:
            src = oracle.feature(rule.coupling.source)
            self._source = (names.index(rule.coupling.source), src.mean, src.std,
                            rule.coupling.strength)

    def scores(self, images):
        flat = np.asarray(images).reshape(len(images), -1)
        feature = flat[:, self._pixel]
        if self._source is not None:
            pixel, mean, std, strength = self._source
            feature = feature - strength * ((flat[:, pixel] - mean) / std)
        return expit(self._slope * (feature - self._cut))


class SyntheticModel(NamedTuple):
    generator: SyntheticGenerator
    classifiers: dict[str, SyntheticClassifier]
    oracle: Oracle


def make_synthetic(spec: SyntheticSpec) -> SyntheticModel:
    validate_spec(spec)
    oracle = Oracle(spec)
    generator = SyntheticGenerator(spec, oracle)
    classifiers = {a.name: SyntheticClassifier(spec, oracle, a.name) for a in spec.attributes}
    return SyntheticModel(generator, classifiers, oracle)


def coupled_pair_spec(cells: Sequence[float], layers: Sequence[LayerInfo] | None = None,
                      channels: Sequence[ChannelId] = (ChannelId(0, 3), ChannelId(2, 5)),
                      names: Sequence[str] = ("a", "b"), **kwargs) -> SyntheticSpec:
    """Two-attribute spec whose joint label cells (00, 01, 10, 11) equal ``cells``.

    The marginals fix both base rates; the coupling strength is solved so the
    11 cell matches.
    """
    cells = np.asarray(cells, dtype=np.float64)
    if cells.shape != (4,) or np.any(cells <= 0) or not math.isclose(cells.sum(), 1.0):
        raise ConfigurationError("cells must be four positive probabilities summing to 1")
    layers = list(layers) if layers is not None else stylegan_layout(6, 16)
    p1 = cells[2] + cells[3]
    p2 = cells[1] + cells[3]

    def build(strength):
        return SyntheticSpec(
            layers=tuple(layers),
            attributes=(
                AttributeRule(names[0], channels[0], float(p1)),
                AttributeRule(names[1], channels[1], float(p2),
                              coupling=Coupling(names[0], float(strength))),
            ),
            **kwargs,
        )

    def gap(strength):
        return Oracle(build(strength)).joint_cells(*names)[3] - cells[3]

    strength = optimize.brentq(gap, -20.0, 20.0, xtol=1e-13)
    return build(strength)


def discovery_spec(rng: np.random.Generator, n_blocks: int = 7, width: int = 64,
                   n_spurious: int = 4, max_spurious_weight: float = 0.03,
                   base_rate: float = 0.2, name: str = "planted") -> SyntheticSpec:
    """Random single-attribute spec for channel discovery checks."""
    layers = stylegan_layout(n_blocks, width)
    last_block = n_blocks - 1
    eligible = [i for i, l in enumerate(layers)
                if not l.is_trgb and l.block <= last_block - EXCLUDED_LAST_BLOCKS]
    picks = set()
    while len(picks) < 1 + n_spurious:
        picks.add(ChannelId(int(rng.choice(eligible)), int(rng.integers(width))))
    picks = sorted(picks)
    rng.shuffle(picks)
    causal, spurious = picks[0], picks[1:]
    weights = rng.uniform(0.2, 1.0, size=n_spurious) * max_spurious_weight
    signs = rng.choice([-1.0, 1.0], size=n_spurious)
    return SyntheticSpec(
        layers=tuple(layers),
        attributes=(AttributeRule(
            name, causal, base_rate,
            spurious=tuple((ch, float(s * w)) for ch, s, w in zip(spurious, signs, weights)),
        ),),
    )
