"""Style-space data model, fairstyle tensors and adapter contracts.

Style codes are kept per layer (one array per style layer) so the layer
metadata needed for channel exclusion stays attached to the values. A code
may be a single sample (1-D arrays) or a batch (2-D arrays, samples first);
every operation here works on both.
"""
from __future__ import annotations

import abc
import hashlib
import json
import threading
import weakref
from contextlib import nullcontext
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Mapping, Sequence, Union

import numpy as np

from fairstyle.errors import (
    AddressError,
    ConfigurationError,
    DegenerateChannelError,
    FingerprintMismatchError,
    GenerationError,
)

CONV = "conv"
TRGB = "trgb"


@dataclass(frozen=True, order=True)
class ChannelId:
    layer: int
    channel: int

    def __post_init__(self):
        if self.layer < 0 or self.channel < 0:
            raise AddressError(f"negative channel address ({self.layer}, {self.channel})")

    def __str__(self):
        return f"({self.layer},{self.channel})"

    def to_json(self) -> dict:
        return {"layer": self.layer, "channel": self.channel}

    @classmethod
    def from_json(cls, obj) -> "ChannelId":
        if isinstance(obj, Mapping):
            return cls(int(obj["layer"]), int(obj["channel"]))
        layer, channel = obj
        return cls(int(layer), int(channel))

    @classmethod
    def parse(cls, text: str) -> "ChannelId":
        """Parse ``"(i,j)"`` or ``"i,j"``."""
        parts = text.strip().strip("()").split(",")
        if len(parts) != 2:
            raise ConfigurationError(f"cannot parse channel address {text!r}")
        try:
            return cls(int(parts[0]), int(parts[1]))
        except ValueError as exc:
            raise ConfigurationError(f"cannot parse channel address {text!r}") from exc


@dataclass(frozen=True)
class LayerInfo:
    width: int
    block: int
    kind: str = CONV

    def __post_init__(self):
        if self.kind not in (CONV, TRGB):
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.width < 1:
            raise ConfigurationError("layer width must be positive")

    @property
    def is_trgb(self) -> bool:
        return self.kind == TRGB


def layout_fingerprint(layers: Sequence[LayerInfo]) -> str:
    """Hash of the layer count and widths; identifies compatible generators."""
    payload = json.dumps([len(layers), [layer.width for layer in layers]])
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def check_address(layers: Sequence[LayerInfo], channel: ChannelId) -> None:
    if channel.layer >= len(layers):
        raise AddressError(f"layer {channel.layer} out of range ({len(layers)} style layers)")
    if channel.channel >= layers[channel.layer].width:
        raise AddressError(
            f"channel {channel.channel} out of range for layer {channel.layer} "
            f"(width {layers[channel.layer].width})"
        )


class StyleCode:
    """Per-layer style vectors for one sample or a batch of samples."""

    __slots__ = ("_values", "_layers")

    def __init__(self, values: Sequence[np.ndarray], layers: Sequence[LayerInfo]):
        values = tuple(np.asarray(v, dtype=np.float64) for v in values)
        layers = tuple(layers)
        if len(values) != len(layers):
            raise ConfigurationError(
                f"style code has {len(values)} layers, metadata covers {len(layers)}"
            )
        ndims = {v.ndim for v in values}
        if len(ndims) != 1 or ndims.pop() not in (1, 2):
            raise ConfigurationError("layer arrays must all be 1-D (sample) or 2-D (batch)")
        rows = {v.shape[0] for v in values if v.ndim == 2}
        if len(rows) > 1:
            raise ConfigurationError("batch size differs between layers")
        for i, (v, info) in enumerate(zip(values, layers)):
            if v.shape[-1] != info.width:
                raise ConfigurationError(
                    f"layer {i} has {v.shape[-1]} channels, expected {info.width}"
                )
        for v in values:
            v.flags.writeable = False
        self._values = values
        self._layers = layers

    @property
    def values(self) -> tuple[np.ndarray, ...]:
        return self._values

    @property
    def layers(self) -> tuple[LayerInfo, ...]:
        return self._layers

    @property
    def is_batch(self) -> bool:
        return self._values[0].ndim == 2

    def __len__(self):
        if not self.is_batch:
            raise TypeError("single style code has no length")
        return self._values[0].shape[0]

    def __getitem__(self, index) -> "StyleCode":
        if not self.is_batch:
            raise TypeError("cannot index a single style code")
        return StyleCode([v[index] for v in self._values], self._layers)

    def __eq__(self, other):
        if not isinstance(other, StyleCode):
            return NotImplemented
        return self._layers == other._layers and all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self._values, other._values)
        )

    __hash__ = None

    def channel(self, address: ChannelId) -> np.ndarray:
        """Value(s) of one channel: a scalar array for a sample, shape (n,) for a batch."""
        check_address(self._layers, address)
        return self._values[address.layer][..., address.channel]

    def with_offsets(self, offsets: Mapping[ChannelId, np.ndarray | float]) -> "StyleCode":
        """New code with the given per-channel offsets added; untouched layers are shared."""
        if not offsets:
            return self
        values = list(self._values)
        copied = set()
        for address, delta in offsets.items():
            check_address(self._layers, address)
            if address.layer not in copied:
                values[address.layer] = values[address.layer].copy()
                copied.add(address.layer)
            values[address.layer][..., address.channel] += delta
        return StyleCode(values, self._layers)

    def flat(self) -> np.ndarray:
        return np.concatenate(self._values, axis=-1)

    @classmethod
    def stack(cls, codes: Sequence["StyleCode"]) -> "StyleCode":
        layers = codes[0].layers
        return cls([np.stack([c.values[i] for c in codes]) for i in range(len(layers))], layers)


@dataclass(frozen=True)
class ChannelStats:
    channel: ChannelId
    mean: float
    std: float
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 2:
            raise ConfigurationError("channel statistics need at least two samples")
        if not np.isfinite(self.std) or self.std <= 0:
            raise DegenerateChannelError(f"channel {self.channel} has zero variance")

    @classmethod
    def from_values(cls, channel: ChannelId, values) -> "ChannelStats":
        values = np.asarray(values, dtype=np.float64)
        if values.size < 2:
            raise ConfigurationError("channel statistics need at least two samples")
        std = float(np.std(values, ddof=1))
        if not np.isfinite(std) or std == 0.0:
            raise DegenerateChannelError(f"channel {channel} has zero variance")
        return cls(channel, float(np.mean(values)), std, int(values.size))

    def normalize(self, values):
        return (values - self.mean) / self.std

    def to_json(self) -> dict:
        return {
            **self.channel.to_json(),
            "mean": self.mean,
            "std": self.std,
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_json(cls, obj) -> "ChannelStats":
        return cls(ChannelId.from_json(obj), float(obj["mean"]), float(obj["std"]),
                   int(obj["sample_count"]))


# -- fairstyle tensors --------------------------------------------------------


def _require_unique(targets: Sequence[ChannelId]) -> None:
    if len(set(targets)) != len(targets):
        raise ConfigurationError("fairstyle targets must be distinct channels")


@dataclass(frozen=True)
class ScalarFairStyle:
    """Adds a constant ``c`` to a single channel."""

    target: ChannelId
    c: float = 0.0

    variant = "scalar"

    @property
    def targets(self) -> tuple[ChannelId, ...]:
        return (self.target,)

    @property
    def parameters(self) -> np.ndarray:
        return np.array([self.c])

    def bias(self, code: StyleCode) -> dict[ChannelId, float]:
        return {self.target: self.c}


def _coupling_shape(params, m: int) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64).ravel()
    if m < 2:
        raise ConfigurationError("coupled fairstyle needs at least two targets")
    expected = 2 * m * (m - 1)
    if params.size != expected:
        raise ConfigurationError(
            f"{m} targets need {expected} coupling parameters, got {params.size}"
        )
    return params


def multi_bias(code: StyleCode, targets: Sequence[ChannelId], params,
               stats: Sequence[ChannelStats]) -> dict[ChannelId, np.ndarray]:
    """Per-target bias where each target is driven by the other targets.

    ``params`` is flat, ordered ``(x_mk, y_mk)`` for ``m`` in target order and
    ``k != m`` ascending, so the bias at target ``m`` is
    ``sum_k x_mk * (s_k - mean_k) / std_k + y_mk``.
    """
    m = len(targets)
    params = _coupling_shape(params, m)
    if stats is None or len(stats) != m:
        raise ConfigurationError("coupled fairstyle needs channel statistics for every target")
    for target, st in zip(targets, stats):
        if st.channel != target:
            raise ConfigurationError(f"statistics for {st.channel} given for target {target}")
    normalized = [st.normalize(code.channel(t)) for t, st in zip(targets, stats)]
    out = {}
    p = 0
    for i, target in enumerate(targets):
        total = 0.0
        for k in range(m):
            if k == i:
                continue
            total = total + (params[p] * normalized[k] + params[p + 1])
            p += 2
        out[target] = total
    return out


def pair_bias(code: StyleCode, targets: Sequence[ChannelId], params: Mapping[str, float],
              stats: Sequence[ChannelStats]) -> dict[ChannelId, np.ndarray]:
    """Two-target coupling: channel 1 follows channel 2's normalized value and vice versa."""
    if len(targets) != 2 or len(stats) != 2:
        raise ConfigurationError("pair bias takes exactly two targets and two statistics")
    first, second = targets
    st1, st2 = stats
    if st1.channel != first or st2.channel != second:
        raise ConfigurationError("statistics do not match the targets")
    s1 = code.channel(first)
    s2 = code.channel(second)
    return {
        first: params["x2"] * ((s2 - st2.mean) / st2.std) + params["y2"],
        second: params["x1"] * ((s1 - st1.mean) / st1.std) + params["y1"],
    }


def pair_params_to_flat(x1: float, y1: float, x2: float, y2: float) -> np.ndarray:
    """Map named two-target parameters onto the flat ``multi_bias`` ordering."""
    return np.array([x2, y2, x1, y1], dtype=np.float64)


@dataclass(frozen=True)
class AffineFairStyle:
    """Sample-dependent coupled bias over M target channels."""

    targets: tuple[ChannelId, ...]
    params: tuple[float, ...]
    stats: tuple[ChannelStats, ...] | None = None

    variant = "affine-coupled"

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        _require_unique(self.targets)
        flat = _coupling_shape(self.params, len(self.targets))
        object.__setattr__(self, "params", tuple(float(v) for v in flat))
        if self.stats is not None:
            object.__setattr__(self, "stats", tuple(self.stats))

    @classmethod
    def zeros(cls, targets: Sequence[ChannelId], stats=None) -> "AffineFairStyle":
        m = len(targets)
        return cls(tuple(targets), (0.0,) * (2 * m * (m - 1)), stats)

    @property
    def parameters(self) -> np.ndarray:
        return np.array(self.params)

    def bias(self, code: StyleCode) -> dict[ChannelId, np.ndarray]:
        if self.stats is None:
            raise ConfigurationError("coupled fairstyle tensor has no channel statistics")
        return multi_bias(code, self.targets, self.params, self.stats)


@dataclass(frozen=True)
class DirectionFairStyle:
    """Style direction (sparse channel weights) scaled by strength ``alpha``."""

    direction: tuple[tuple[ChannelId, float], ...]
    alpha: float = 0.0

    variant = "direction-scaled"

    def __post_init__(self):
        direction = self.direction
        if isinstance(direction, Mapping):
            direction = direction.items()
        direction = tuple((ch, float(w)) for ch, w in direction)
        _require_unique([ch for ch, _ in direction])
        object.__setattr__(self, "direction", direction)

    @property
    def targets(self) -> tuple[ChannelId, ...]:
        return tuple(ch for ch, _ in self.direction)

    @property
    def parameters(self) -> np.ndarray:
        return np.array([self.alpha])

    def bias(self, code: StyleCode) -> dict[ChannelId, float]:
        return {ch: self.alpha * w for ch, w in self.direction}


FairStyleTensor = Union[ScalarFairStyle, AffineFairStyle, DirectionFairStyle]


def apply_fairstyle(code: StyleCode, tensor: FairStyleTensor | None) -> StyleCode:
    """Return ``code`` plus the tensor's bias. The input is never mutated."""
    if tensor is None:
        return code
    for target in tensor.targets:
        check_address(code.layers, target)
        if code.layers[target.layer].is_trgb:
            raise AddressError(f"channel {target} lies in a tRGB layer; tRGB styles are not editable")
    return code.with_offsets(tensor.bias(code))


def tensor_hash(tensor: FairStyleTensor | None) -> str:
    if tensor is None:
        return "none"
    payload = json.dumps(tensor_payload(tensor), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def tensor_payload(tensor: FairStyleTensor) -> dict:
    """Variant, targets, parameters and statistics; the hashable part of a saved tensor."""
    if isinstance(tensor, ScalarFairStyle):
        params = {"c": tensor.c}
    elif isinstance(tensor, AffineFairStyle):
        params = {"coupling": list(tensor.params)}
    else:
        params = {
            "alpha": tensor.alpha,
            "direction": [{**ch.to_json(), "weight": w} for ch, w in tensor.direction],
        }
    stats = getattr(tensor, "stats", None)
    return {
        "variant": tensor.variant,
        "targets": [t.to_json() for t in tensor.targets],
        "parameters": params,
        "channel_stats": [s.to_json() for s in stats] if stats else [],
    }


def tensor_to_json(tensor: FairStyleTensor, layers: Sequence[LayerInfo],
                   attribute_names: Sequence[str] = (), created_at: str | None = None) -> dict:
    if created_at is None:
        created_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return {
        **tensor_payload(tensor),
        "generator_fingerprint": layout_fingerprint(layers),
        "attribute_names": list(attribute_names),
        "created_at": created_at,
    }


def tensor_from_json(doc: Mapping, layers: Sequence[LayerInfo] | None = None) -> FairStyleTensor:
    """Rebuild a tensor; with ``layers`` given, refuse documents from another generator."""
    if layers is not None and doc.get("generator_fingerprint") != layout_fingerprint(layers):
        raise FingerprintMismatchError(
            f"tensor was fitted to generator {doc.get('generator_fingerprint')}, "
            f"this generator is {layout_fingerprint(layers)}"
        )
    variant = doc["variant"]
    targets = [ChannelId.from_json(t) for t in doc["targets"]]
    params = doc["parameters"]
    if variant == ScalarFairStyle.variant:
        if len(targets) != 1:
            raise ConfigurationError("scalar tensor must have exactly one target")
        tensor = ScalarFairStyle(targets[0], float(params["c"]))
    elif variant == AffineFairStyle.variant:
        stats = [ChannelStats.from_json(s) for s in doc.get("channel_stats", [])]
        tensor = AffineFairStyle(tuple(targets), tuple(params["coupling"]), tuple(stats) or None)
    elif variant == DirectionFairStyle.variant:
        direction = [(ChannelId.from_json(d), float(d["weight"])) for d in params["direction"]]
        tensor = DirectionFairStyle(tuple(direction), float(params["alpha"]))
    else:
        raise ConfigurationError(f"unknown fairstyle variant {variant!r}")
    if layers is not None:
        for t in tensor.targets:
            check_address(layers, t)
    return tensor


# -- adapter contracts ---------------------------------------------------------


class GeneratorAdapter(abc.ABC):
    """Latent -> style code -> image.

    Implementations must be deterministic: the same seeds give the same
    latents, and the same style code gives the same image.
    """

    concurrent_safe: bool = False

    @property
    @abc.abstractmethod
    def layers(self) -> tuple[LayerInfo, ...]:
        ...

    @abc.abstractmethod
    def sample_latents(self, seeds: Sequence[int]) -> np.ndarray:
        """One latent vector per seed, shape (n, latent_dim)."""

    @abc.abstractmethod
    def styles(self, latents: np.ndarray) -> StyleCode:
        """Map a batch of latents to a batched style code."""

    @abc.abstractmethod
    def synthesize(self, code: StyleCode) -> np.ndarray:
        """Render a batched style code; images are stacked along axis 0."""

    @property
    def fingerprint(self) -> str:
        return layout_fingerprint(self.layers)

    def render(self, code: StyleCode, tensor: FairStyleTensor | None = None) -> np.ndarray:
        return self.synthesize(apply_fairstyle(code, tensor))


class ClassifierAdapter(abc.ABC):
    """Scores images in [0, 1] for one attribute; labels are ``score >= threshold``."""

    name: str = "attribute"
    threshold: float = 0.5
    concurrent_safe: bool = False

    @abc.abstractmethod
    def scores(self, images: np.ndarray) -> np.ndarray:
        ...

    def decide(self, scores: np.ndarray) -> np.ndarray:
        return (np.asarray(scores) >= self.threshold).astype(np.uint8)


_locks: "weakref.WeakKeyDictionary[object, threading.Lock]" = weakref.WeakKeyDictionary()
_locks_guard = threading.Lock()


def adapter_lock(adapter):
    """Context manager serializing calls into adapters that are not thread safe."""
    if getattr(adapter, "concurrent_safe", False):
        return nullcontext()
    with _locks_guard:
        lock = _locks.get(adapter)
        if lock is None:
            lock = _locks[adapter] = threading.Lock()
    return lock


# -- batch generation -------------------------------------------------------------


def latent_seeds(seed: int, n: int) -> np.ndarray:
    """Per-sample latent seeds derived from one batch seed."""
    return np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)


def derive_seed(seed: int, *keys: int | str) -> int:
    """Stable child seed; string keys are hashed so stage names can be used."""
    words = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            key = int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "little")
        words.append(int(key))
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class Batch:
    images: np.ndarray
    styles: StyleCode
    edited: StyleCode
    seeds: np.ndarray = field(repr=False)

    def __len__(self):
        return self.images.shape[0]


def sample_styles(adapter: GeneratorAdapter, n: int, seed: int) -> tuple[StyleCode, np.ndarray]:
    if n < 1:
        raise ConfigurationError("batch size must be at least 1")
    seeds = latent_seeds(seed, n)
    with adapter_lock(adapter):
        try:
            latents = adapter.sample_latents(seeds)
            code = adapter.styles(latents)
        except Exception as exc:
            raise GenerationError(f"style sampling failed: {exc}") from exc
    return code, seeds


def synthesize(adapter: GeneratorAdapter, code: StyleCode) -> np.ndarray:
    with adapter_lock(adapter):
        try:
            return adapter.synthesize(code)
        except Exception as exc:
            failure = exc
        # locate the failing sample for the error message
        for k in range(len(code)):
            try:
                adapter.synthesize(code[k:k + 1])
            except Exception as exc:
                raise GenerationError(f"synthesis failed at sample {k}: {exc}", index=k) from exc
        raise GenerationError(f"synthesis failed: {failure}") from failure


def generate_batch(adapter: GeneratorAdapter, n: int, tensor: FairStyleTensor | None = None,
                   seed: int = 0) -> Batch:
    styles, seeds = sample_styles(adapter, n, seed)
    edited = apply_fairstyle(styles, tensor)
    images = synthesize(adapter, edited)
    if images.shape[0] != n:
        raise GenerationError(f"generator returned {images.shape[0]} images for {n} codes")
    return Batch(images, styles, edited, seeds)
