"""Config-driven runs: generator/classifier loading, artifacts, sampling.

Seeds: every stage draws from ``derive_seed(global_seed, stage)`` with stage
names ``discover:<attribute>``, ``debias``, ``audit-before``, ``audit-after``
and ``sample``, so a run is replayable from its config alone.
"""
from __future__ import annotations

import hashlib
import importlib
import json
import os
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from fairstyle.audit import audit, label_batch
from fairstyle.core import (
    ChannelId,
    ClassifierAdapter,
    FairStyleTensor,
    GeneratorAdapter,
    derive_seed,
    generate_batch,
    tensor_from_json,
    tensor_hash,
    tensor_to_json,
)
from fairstyle.debias import (
    OptimizerConfig,
    optimize_multi,
    optimize_single,
    optimize_text_direction,
)
from fairstyle.discovery import DiscoveryConfig, find_controlling_channel
from fairstyle.errors import ConfigurationError, FingerprintMismatchError
from fairstyle.synthgen import SyntheticSpec, make_synthetic
from fairstyle.textclip import ClipClassifier, PromptPair

SYNTHETIC = "synthetic"


def cache_dir() -> Path:
    """Model-asset cache, ``$FAIRSTYLE_CACHE`` or ``~/.cache/fairstyle``."""
    return Path(os.environ.get("FAIRSTYLE_CACHE", Path.home() / ".cache" / "fairstyle"))


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_json_atomic(path, obj) -> None:
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_object(ref: str):
    """Resolve ``package.module:attribute``."""
    module, sep, attr = ref.partition(":")
    if not sep or not module or not attr:
        raise ConfigurationError(f"expected 'module:attribute', got {ref!r}")
    try:
        obj = importlib.import_module(module)
        for part in attr.split("."):
            obj = getattr(obj, part)
    except (ImportError, AttributeError) as exc:
        raise ConfigurationError(f"cannot load {ref!r}: {exc}") from exc
    return obj


@dataclass
class Models:
    generator: GeneratorAdapter
    builtin_classifiers: dict[str, ClassifierAdapter] = field(default_factory=dict)
    oracle: Any = None


def load_models(generator: Mapping, base: Path = Path(".")) -> Models:
    """Build the generator from ``{"synthetic": path}`` or ``{"adapter": ref, "checkpoint": path}``."""
    sources = [k for k in ("synthetic", "adapter") if generator.get(k)]
    if len(sources) != 1:
        raise ConfigurationError("generator needs exactly one of 'synthetic' or 'adapter'",
                                 field="generator")
    if sources[0] == "synthetic":
        path = base / generator["synthetic"]
        if not path.is_file():
            raise ConfigurationError(f"synthetic spec {path} not found", field="generator.synthetic")
        model = make_synthetic(SyntheticSpec.load(path))
        return Models(model.generator, dict(model.classifiers), model.oracle)
    checkpoint = generator.get("checkpoint")
    if checkpoint is not None:
        checkpoint = base / checkpoint
        if not checkpoint.exists():
            raise ConfigurationError(f"checkpoint {checkpoint} not found",
                                     field="generator.checkpoint")
    factory = load_object(generator["adapter"])
    return Models(factory(checkpoint=checkpoint, cache_dir=cache_dir()))


def load_classifier(attr: Mapping, index: int, models: Models, config: Mapping,
                    base: Path = Path(".")) -> ClassifierAdapter:
    where = f"attributes[{index}]"
    name = attr.get("name")
    if not name:
        raise ConfigurationError("attribute needs a name", field=f"{where}.name")
    has_clf = "classifier" in attr
    has_prompts = "prompts" in attr
    if has_clf == has_prompts:
        raise ConfigurationError(f"attribute {name!r} needs exactly one of 'classifier' or 'prompts'",
                                 field=where)
    if has_prompts:
        prompts = attr["prompts"]
        pair = PromptPair(prompts.get("positive", ""), prompts.get("negative", ""))
        ref = config.get("embedding_backend")
        if not ref:
            raise ConfigurationError("prompt attributes need 'embedding_backend'",
                                     field="embedding_backend")
        backend = load_object(ref)(cache_dir=cache_dir())
        return ClipClassifier(backend, pair, name)
    source = attr["classifier"]
    if source == SYNTHETIC:
        if name not in models.builtin_classifiers:
            raise ConfigurationError(f"generator has no built-in classifier {name!r}",
                                     field=f"{where}.classifier")
        return models.builtin_classifiers[name]
    path = base / source
    if not path.exists():
        raise ConfigurationError(f"classifier checkpoint {path} not found",
                                 field=f"{where}.classifier")
    ref = config.get("classifier_loader")
    if not ref:
        raise ConfigurationError("checkpoint classifiers need 'classifier_loader'",
                                 field="classifier_loader")
    return load_object(ref)(path, name=name, cache_dir=cache_dir())


def _dataclass_from(cls, values: Mapping | None, where: str, **overrides):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown {where} option(s): {sorted(unknown)}", field=where)
    values.update(overrides)
    return cls(**values)


def parse_channels(text: str) -> list[ChannelId]:
    """``"(i,j);(k,l)"`` -> channel ids."""
    return [ChannelId.parse(part) for part in text.split(";") if part.strip()]


def discover_channels(models: Models, classifiers: Sequence[ClassifierAdapter],
                      discovery: DiscoveryConfig, seed: int) -> dict:
    out = {}
    for clf in classifiers:
        cfg = replace(discovery, seed=derive_seed(seed, f"discover:{clf.name}"))
        out[clf.name] = find_controlling_channel(models.generator, clf, cfg)
    return out


def fit_tensor(generator: GeneratorAdapter, classifiers: Sequence[ClassifierAdapter],
               channels: Sequence[ChannelId], optimizer: OptimizerConfig, direction=None):
    if direction is not None:
        if len(classifiers) != 1:
            raise ConfigurationError("a text direction debiases exactly one attribute")
        return optimize_text_direction(generator, classifiers[0], direction, optimizer)
    if len(classifiers) == 1:
        return optimize_single(generator, classifiers[0], channels[0], optimizer)
    return optimize_multi(generator, classifiers, channels, optimizer)


def parse_direction(obj) -> tuple[tuple[ChannelId, float], ...]:
    return tuple((ChannelId.from_json(d), float(d["weight"])) for d in obj)


def run_pipeline(config: Mapping, base: Path = Path("."), out_dir: Path | None = None) -> dict:
    """discover -> debias -> audit before/after; returns the artifact paths."""
    seed = int(config.get("seed", 0))
    chash = config_hash(config)
    out = Path(out_dir or base / config.get("output_dir", "fairstyle-out"))
    models = load_models(config.get("generator") or {}, base)
    attrs = config.get("attributes") or []
    if not attrs:
        raise ConfigurationError("config lists no attributes", field="attributes")
    classifiers = [load_classifier(a, i, models, config, base) for i, a in enumerate(attrs)]
    names = [c.name for c in classifiers]
    discovery = _dataclass_from(DiscoveryConfig, config.get("discovery"), "discovery")
    optimizer = _dataclass_from(OptimizerConfig, config.get("optimizer"), "optimizer",
                                seed=derive_seed(seed, "debias"))
    audit_cfg = dict(config.get("audit") or {})
    n_audit = int(audit_cfg.get("n", 10000))
    joints = audit_cfg.get("joints") or (["+".join(names)] if len(names) > 1 else [])
    stamp = {"config_hash": chash, "seed": seed}

    directions = [a.get("direction") for a in attrs]
    direction = parse_direction(directions[0]) if directions[0] is not None else None
    channels = []
    found = {}
    if direction is None:
        explicit = [a.get("channel") for a in attrs]
        if all(ch is not None for ch in explicit):
            channels = [ChannelId.from_json(ch) for ch in explicit]
        else:
            found = discover_channels(models, classifiers, discovery, seed)
            channels = [ChannelId.from_json(a["channel"]) if a.get("channel") is not None
                        else found[a["name"]].channel for a in attrs]
    paths = {}
    paths["channels"] = out / "channels.json"
    write_json_atomic(paths["channels"], {
        **stamp,
        "channels": {n: ch.to_json() for n, ch in zip(names, channels)},
        "discovery": {n: r.to_json() for n, r in found.items()},
    })
    result = fit_tensor(models.generator, classifiers, channels, optimizer, direction)
    paths["tensor"] = out / "tensor.json"
    write_json_atomic(paths["tensor"], {
        **tensor_to_json(result.tensor, models.generator.layers, names), **stamp})
    paths["trace"] = out / "trace.json"
    write_json_atomic(paths["trace"], {**result.trace.to_json(), **stamp})
    provenance = {a["name"]: a["prompts"] for a in attrs if "prompts" in a}
    for stage, tensor in (("before", None), ("after", result.tensor)):
        report = audit(models.generator, classifiers, n_audit, tensor, joints,
                       derive_seed(seed, f"audit-{stage}"), {"prompts": provenance, **stamp})
        paths[f"report_{stage}"] = out / f"report_{stage}.json"
        write_json_atomic(paths[f"report_{stage}"], report.to_json())
    return {k: str(v) for k, v in paths.items()}


def load_tensor(path, generator: GeneratorAdapter) -> FairStyleTensor:
    doc = json.loads(Path(path).read_text())
    return tensor_from_json(doc, generator.layers)


def sample(generator: GeneratorAdapter, tensor: FairStyleTensor | None, n: int, seed: int,
           out_dir, tensor_doc: Mapping | None = None) -> dict:
    """Write ``n`` images as ``.npy`` files plus ``manifest.json``."""
    if tensor_doc is not None and tensor_doc.get("generator_fingerprint") != generator.fingerprint:
        raise FingerprintMismatchError("tensor was fitted to a different generator")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    batch = generate_batch(generator, n, tensor, seed)
    entries = []
    for k in range(n):
        name = f"image_{k:06d}.npy"
        image = np.ascontiguousarray(batch.images[k])
        np.save(out / name, image, allow_pickle=False)
        entries.append({
            "file": name,
            "latent_seed": int(batch.seeds[k]),
            "sha256": hashlib.sha256(image.tobytes()).hexdigest(),
        })
    manifest = {
        "seed": seed,
        "n": n,
        "tensor_hash": tensor_hash(tensor),
        "generator_fingerprint": generator.fingerprint,
        "images": entries,
    }
    write_json_atomic(out / "manifest.json", manifest)
    return manifest


def relabel_manifest(out_dir, classifiers: Sequence[ClassifierAdapter]) -> np.ndarray:
    """Reload a sampled directory and label its images."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    images = np.stack([np.load(out / e["file"]) for e in manifest["images"]])
    return label_batch(classifiers, images)
