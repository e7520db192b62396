"""Labeling, empirical attribute distributions and KL-to-uniform audits."""
from __future__ import annotations

import csv
import io
import math
import shlex
import subprocess
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Mapping, Sequence

import numpy as np

from fairstyle.core import (
    ClassifierAdapter,
    FairStyleTensor,
    GeneratorAdapter,
    adapter_lock,
    generate_batch,
    tensor_hash,
)
from fairstyle.errors import ConfigurationError, FairStyleError, LabelingError

_Z95 = NormalDist().inv_cdf(0.975)


def _checked_scores(classifier: ClassifierAdapter, images: np.ndarray) -> np.ndarray:
    name = classifier.name
    with adapter_lock(classifier):
        try:
            scores = np.asarray(classifier.scores(images), dtype=np.float64)
        except Exception as exc:
            scores = None
            failure = exc
    if scores is None:
        for k in range(len(images)):
            try:
                with adapter_lock(classifier):
                    classifier.scores(images[k:k + 1])
            except Exception as exc:
                raise LabelingError(f"classifier {name!r} failed on image {k}: {exc}",
                                    attribute=name, index=k) from exc
        raise LabelingError(f"classifier {name!r} failed: {failure}", attribute=name) from failure
    if scores.shape != (len(images),):
        raise LabelingError(
            f"classifier {name!r} returned shape {scores.shape} for {len(images)} images",
            attribute=name)
    bad = np.flatnonzero(~np.isfinite(scores) | (scores < 0.0) | (scores > 1.0))
    if bad.size:
        k = int(bad[0])
        raise LabelingError(f"classifier {name!r} scored image {k} as {scores[k]!r}, outside [0, 1]",
                            attribute=name, index=k)
    return scores


def score_batch(classifiers: Sequence[ClassifierAdapter], images: np.ndarray) -> np.ndarray:
    """Scores of shape (batch, attributes)."""
    if len(images) == 0:
        raise ConfigurationError("cannot label an empty batch")
    if not classifiers:
        raise ConfigurationError("no classifiers given")
    return np.stack([_checked_scores(c, images) for c in classifiers], axis=1)


def label_batch(classifiers: Sequence[ClassifierAdapter], images: np.ndarray) -> np.ndarray:
    """Binary labels of shape (batch, attributes), thresholded per classifier."""
    scores = score_batch(classifiers, images)
    return np.stack([c.decide(scores[:, i]) for i, c in enumerate(classifiers)],
                    axis=1).astype(np.uint8)


def cell_name(bits: Sequence[int]) -> str:
    return "".join("T" if b else "F" for b in bits)


def cell_bits(index: int, m: int) -> tuple[int, ...]:
    """Bits of cell ``index``; the first attribute is the most significant bit."""
    return tuple((index >> (m - 1 - t)) & 1 for t in range(m))


def wilson_interval(count: int, n: int, z: float = _Z95) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    p = count / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    low = 0.0 if count == 0 else max(0.0, centre - half)
    high = 1.0 if count == n else min(1.0, centre + half)
    return (low, high)


@dataclass(frozen=True)
class AttributeDistribution:
    """Counts over the 2**M label combinations of ``names``."""

    names: tuple[str, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if not self.names:
            raise ConfigurationError("distribution needs at least one attribute")
        if len(self.counts) != 2 ** len(self.names):
            raise ConfigurationError(
                f"{len(self.names)} attributes need {2 ** len(self.names)} cells")
        if any(c < 0 for c in self.counts) or self.sample_count == 0:
            raise ConfigurationError("counts must be non-negative and not all zero")

    @property
    def sample_count(self) -> int:
        return sum(self.counts)

    @property
    def probabilities(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.float64) / self.sample_count

    @property
    def key(self) -> str:
        return "+".join(self.names)

    def cells(self) -> dict[str, float]:
        m = len(self.names)
        return {cell_name(cell_bits(i, m)): float(p) for i, p in enumerate(self.probabilities)}

    def marginalize(self, keep: Sequence[str]) -> "AttributeDistribution":
        """Sum counts over the attributes not in ``keep`` (exact, integer-valued)."""
        idx = [self._index(n) for n in keep]
        m = len(self.names)
        out = [0] * (2 ** len(idx))
        for i, count in enumerate(self.counts):
            bits = cell_bits(i, m)
            j = 0
            for t in idx:
                j = (j << 1) | bits[t]
            out[j] += count
        return AttributeDistribution(tuple(keep), tuple(out))

    def _index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigurationError(f"unknown attribute {name!r}") from None

    def to_json(self) -> dict:
        m = len(self.names)
        n = self.sample_count
        return {
            "attributes": list(self.names),
            "sample_count": n,
            "kl_to_uniform": kl_to_uniform(self),
            "cells": [
                {
                    "cell": cell_name(cell_bits(i, m)),
                    "bits": list(cell_bits(i, m)),
                    "count": c,
                    "probability": c / n,
                    "ci95": list(wilson_interval(c, n)),
                }
                for i, c in enumerate(self.counts)
            ],
        }

    @classmethod
    def from_json(cls, obj) -> "AttributeDistribution":
        return cls(tuple(obj["attributes"]), tuple(c["count"] for c in obj["cells"]))


def empirical_distribution(labels: np.ndarray, names: Sequence[str],
                           subset: Sequence[str] | None = None) -> AttributeDistribution:
    """Count label combinations of ``subset`` (default: all columns)."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    if labels.shape[0] == 0:
        raise ConfigurationError("cannot build a distribution from zero samples")
    names = list(names)
    if labels.shape[1] != len(names):
        raise ConfigurationError(f"{labels.shape[1]} label columns for {len(names)} names")
    subset = list(names if subset is None else subset)
    if not subset:
        raise ConfigurationError("attribute subset is empty")
    cols = []
    for name in subset:
        if name not in names:
            raise ConfigurationError(f"unknown attribute {name!r}", field="attributes")
        cols.append(names.index(name))
    if np.any((labels != 0) & (labels != 1)):
        raise ConfigurationError("labels must be 0 or 1")
    m = len(cols)
    weights = 1 << np.arange(m - 1, -1, -1)
    index = labels[:, cols].astype(np.int64) @ weights
    counts = np.bincount(index, minlength=2 ** m)
    return AttributeDistribution(tuple(subset), tuple(counts.tolist()))


def _excess(r: float, u: float) -> float:
    """r log r - r + 1 for r = 1 + u; ``u`` is passed separately to keep its digits near r = 1."""
    if abs(u) < 0.05:
        # alternating series sum_{n>=2} (-u)^n / (n (n - 1))
        return math.fsum((-u) ** n / (n * (n - 1)) for n in range(2, 16))
    if r == 0.0:
        return 1.0
    return r * math.log(r) - r + 1.0


def kl_to_uniform(dist: AttributeDistribution | Sequence[float]) -> float:
    """KL(p || uniform) in nats over the cells of ``dist``; empty cells contribute 0.

    Written as ``(1/k) sum f(p k)`` with ``f(r) = r log r - r + 1 >= 0`` so that
    near-uniform inputs do not lose digits to cancellation.
    """
    if isinstance(dist, AttributeDistribution):
        k = len(dist.counts)
        n = dist.sample_count
        # u = r - 1 straight from integer counts, exact up to one rounding
        terms = [_excess(c * k / n, (c * k - n) / n) for c in dist.counts]
        return max(0.0, math.fsum(terms) / k)
    probs = [float(p) for p in dist]
    k = len(probs)
    terms = [_excess(p * k, p * k - 1.0) / k for p in probs]
    # restores the exact definition when the probabilities do not sum to 1
    return max(0.0, math.fsum([*terms, *probs, -1.0]))


def soft_cells(scores: np.ndarray) -> np.ndarray:
    """Expected cell probabilities when each score is read as an independent Bernoulli mean."""
    scores = np.asarray(scores, dtype=np.float64)
    n, m = scores.shape
    cells = np.ones((n, 1))
    for t in range(m):
        p = scores[:, t:t + 1]
        # the new attribute becomes the least significant bit
        cells = np.stack([cells * (1 - p), cells * p], axis=2).reshape(n, -1)
    return cells.mean(axis=0)


@dataclass
class AuditReport:
    marginals: dict[str, AttributeDistribution]
    joints: dict[str, AttributeDistribution]
    generator_fingerprint: str
    seed: int
    sample_count: int
    tensor_hash: str = "none"
    provenance: dict = field(default_factory=dict)

    @property
    def kl(self) -> dict[str, float]:
        out = {k: kl_to_uniform(d) for k, d in self.marginals.items()}
        out.update({k: kl_to_uniform(d) for k, d in self.joints.items()})
        return out

    def to_json(self) -> dict:
        return {
            "generator_fingerprint": self.generator_fingerprint,
            "seed": self.seed,
            "sample_count": self.sample_count,
            "tensor_hash": self.tensor_hash,
            "kl_to_uniform": self.kl,
            "marginals": {k: d.to_json() for k, d in self.marginals.items()},
            "joints": {k: d.to_json() for k, d in self.joints.items()},
            "provenance": self.provenance,
        }

    def csv_rows(self) -> list[dict]:
        rows = []
        for kind, group in (("marginal", self.marginals), ("joint", self.joints)):
            for key, dist in group.items():
                doc = dist.to_json()
                for cell in doc["cells"]:
                    rows.append({
                        "kind": kind,
                        "distribution": key,
                        "cell": cell["cell"],
                        "count": cell["count"],
                        "probability": cell["probability"],
                        "ci95_low": cell["ci95"][0],
                        "ci95_high": cell["ci95"][1],
                        "kl_to_uniform": doc["kl_to_uniform"],
                    })
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.csv_rows()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()


def parse_joint(request: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(request, str):
        request = [part.strip() for part in request.split("+")]
    request = tuple(request)
    if len(request) < 2 or len(set(request)) != len(request):
        raise ConfigurationError(f"joint request {request!r} needs two or more distinct attributes")
    return request


def audit(adapter: GeneratorAdapter, classifiers: Sequence[ClassifierAdapter], n: int,
          tensor: FairStyleTensor | None = None, joints: Sequence = (), seed: int = 0,
          provenance: Mapping | None = None) -> AuditReport:
    if n < 1:
        raise ConfigurationError("audit needs at least one sample", field="n")
    names = [c.name for c in classifiers]
    if len(set(names)) != len(names):
        raise ConfigurationError("classifier names must be unique")
    requests = [parse_joint(j) for j in joints]
    batch = generate_batch(adapter, n, tensor, seed)
    labels = label_batch(classifiers, batch.images)
    marginals = {name: empirical_distribution(labels, names, [name]) for name in names}
    joint = {}
    for req in requests:
        dist = empirical_distribution(labels, names, req)
        joint[dist.key] = dist
    return AuditReport(marginals, joint, adapter.fingerprint, seed, n, tensor_hash(tensor),
                       dict(provenance or {}))


def external_fid(command: str, generated_dir, reference) -> float:
    """Run a user-supplied FID scorer; it gets both paths appended and must print one number."""
    argv = shlex.split(command) + [str(generated_dir), str(reference)]
    proc = subprocess.run(argv, capture_output=True, text=True, check=False)
    if proc.returncode != 0:
        raise FairStyleError(f"FID command exited with {proc.returncode}: {proc.stderr.strip()}")
    try:
        return float(proc.stdout.strip().split()[-1])
    except (IndexError, ValueError) as exc:
        raise FairStyleError(f"FID command printed no number: {proc.stdout!r}") from exc
