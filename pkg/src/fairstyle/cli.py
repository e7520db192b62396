"""``fairstyle`` command line: discover, debias, audit, sample, synth, pipeline."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from fairstyle.audit import audit, external_fid
from fairstyle.core import tensor_to_json
from fairstyle.debias import FIXED, FRESH, OptimizerConfig
from fairstyle.discovery import DiscoveryConfig, find_controlling_channel
from fairstyle.errors import ConfigurationError, FairStyleError
from fairstyle.pipeline import (
    SYNTHETIC,
    Models,
    config_hash,
    discover_channels,
    fit_tensor,
    load_classifier,
    load_models,
    load_tensor,
    parse_channels,
    parse_direction,
    run_pipeline,
    sample,
    write_json_atomic,
    write_text_atomic,
)
from fairstyle.synthgen import SyntheticSpec, make_synthetic


def _add_generator(p: argparse.ArgumentParser) -> None:
    src = p.add_argument_group("generator")
    src.add_argument("--synthetic", metavar="SPEC", help="synthetic spec JSON")
    src.add_argument("--adapter", metavar="MODULE:FACTORY", help="generator adapter factory")
    src.add_argument("--checkpoint", help="checkpoint passed to the adapter factory")
    src.add_argument("--classifier-loader", metavar="MODULE:FN",
                     help="loader for classifier checkpoints (--classifier NAME=PATH)")
    src.add_argument("--classifier", action="append", default=[], metavar="NAME=PATH")
    txt = p.add_argument_group("text labeling")
    txt.add_argument("--text-positive")
    txt.add_argument("--text-negative")
    txt.add_argument("--text-name", help="attribute name for the prompt pair")
    txt.add_argument("--embedding-backend", metavar="MODULE:FACTORY")


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0)


def _split(text: str | None) -> list[str]:
    return [t.strip() for t in (text or "").split(",") if t.strip()]


def _models(args) -> Models:
    return load_models({"synthetic": args.synthetic, "adapter": args.adapter,
                        "checkpoint": args.checkpoint})


def _attribute_entries(args, names: list[str]) -> tuple[list[dict], dict]:
    paths = {}
    for item in args.classifier:
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--classifier expects NAME=PATH, got {item!r}", field="classifier")
        paths[name] = path
    entries = [{"name": n, "classifier": paths.get(n, SYNTHETIC)} for n in names]
    if args.text_positive or args.text_negative:
        entries.append({
            "name": args.text_name or args.text_positive,
            "prompts": {"positive": args.text_positive or "", "negative": args.text_negative or ""},
        })
    extra = {"embedding_backend": args.embedding_backend, "classifier_loader": args.classifier_loader}
    return entries, extra


def _classifiers(args, models: Models, names: list[str]):
    entries, extra = _attribute_entries(args, names)
    if not entries:
        raise ConfigurationError("no attributes given", field="attributes")
    return [load_classifier(e, i, models, extra) for i, e in enumerate(entries)], entries


def _stamp(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    return {"config_hash": config_hash(cfg), "seed": getattr(args, "seed", None)}


def cmd_synth(args) -> int:
    spec = SyntheticSpec.load(args.spec)
    model = make_synthetic(spec)
    doc = {
        "generator_fingerprint": model.generator.fingerprint,
        "attributes": model.oracle.summary(),
        "spec": spec.to_json(),
    }
    if args.out:
        write_json_atomic(args.out, doc)
    else:
        print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_discover(args) -> int:
    models = _models(args)
    classifiers, _ = _classifiers(args, models, _split(args.attribute))
    if len(classifiers) != 1:
        raise ConfigurationError("discover takes exactly one attribute", field="attribute")
    config = DiscoveryConfig(batch_size=args.batch_size, perturbation=args.perturbation,
                             exclude_last_blocks=args.exclude_last_blocks, seed=args.seed,
                             workers=args.workers)
    result = find_controlling_channel(models.generator, classifiers[0], config)
    doc = {**_stamp(args), "attribute": classifiers[0].name, **result.to_json()}
    if args.out:
        write_json_atomic(args.out, doc)
    else:
        print(json.dumps(doc["channel"]))
    return 0


def cmd_debias(args) -> int:
    models = _models(args)
    classifiers, entries = _classifiers(args, models, _split(args.attributes))
    optimizer = OptimizerConfig(
        batch_size=args.n, max_iterations=args.max_iters, tolerance=args.tol, step=args.step,
        learning_rate=args.lr, batch_policy=args.policy, smooth=not args.hard,
        stats_samples=args.stats_n, seed=args.seed)
    direction = None
    channels = []
    if args.direction:
        direction = parse_direction(json.loads(Path(args.direction).read_text()))
    elif args.channels == "auto":
        discovery = DiscoveryConfig(batch_size=args.discovery_batch_size,
                                    perturbation=args.perturbation,
                                    exclude_last_blocks=args.exclude_last_blocks)
        found = discover_channels(models, classifiers, discovery, args.seed)
        channels = [found[c.name].channel for c in classifiers]
    else:
        channels = parse_channels(args.channels)
        if len(channels) != len(classifiers):
            raise ConfigurationError(f"{len(classifiers)} attributes but {len(channels)} channels",
                                     field="channels")
    result = fit_tensor(models.generator, classifiers, channels, optimizer, direction)
    stamp = _stamp(args)
    write_json_atomic(args.out, {
        **tensor_to_json(result.tensor, models.generator.layers, [c.name for c in classifiers]),
        **stamp,
        "prompts": {e["name"]: e["prompts"] for e in entries if "prompts" in e},
    })
    if args.trace:
        write_json_atomic(args.trace, {**result.trace.to_json(), **stamp})
    print(json.dumps({"status": result.trace.status, "best_kl": result.trace.best.kl,
                      "initial_kl": result.trace.initial_kl}))
    return 0


def cmd_audit(args) -> int:
    models = _models(args)
    classifiers, entries = _classifiers(args, models, _split(args.attributes))
    tensor = load_tensor(args.tensor, models.generator) if args.tensor else None
    prompts = {e["name"]: e["prompts"] for e in entries if "prompts" in e}
    report = audit(models.generator, classifiers, args.n, tensor, args.joint, args.seed,
                   {"prompts": prompts, **_stamp(args)})
    doc = report.to_json()
    if args.fid_command:
        if not args.fid_images or not args.fid_reference:
            raise ConfigurationError("--fid-command needs --fid-images and --fid-reference",
                                     field="fid_command")
        doc["fid"] = external_fid(args.fid_command, args.fid_images, args.fid_reference)
    if args.out:
        write_json_atomic(args.out, doc)
    if args.csv:
        write_text_atomic(args.csv, report.to_csv())
    if not args.out and not args.csv:
        if args.format == "csv":
            sys.stdout.write(report.to_csv())
        else:
            print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_sample(args) -> int:
    models = _models(args)
    tensor = doc = None
    if args.tensor:
        doc = json.loads(Path(args.tensor).read_text())
        tensor = load_tensor(args.tensor, models.generator)
    manifest = sample(models.generator, tensor, args.n, args.seed, args.out_dir, doc)
    print(json.dumps({"n": manifest["n"], "tensor_hash": manifest["tensor_hash"]}))
    return 0


def cmd_pipeline(args) -> int:
    path = Path(args.config)
    try:
        config = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}", field="config") from exc
    paths = run_pipeline(config, base=path.parent, out_dir=Path(args.out_dir) if args.out_dir else None)
    print(json.dumps(paths, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairstyle",
                                     description="Debias style-based generators in style space.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="validate a synthetic spec and print its oracle")
    p.add_argument("--spec", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("discover", help="rank style channels by control over an attribute")
    _add_generator(p)
    p.add_argument("--attribute", default="")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--perturbation", type=float, default=10.0)
    p.add_argument("--exclude-last-blocks", type=int, default=4)
    p.add_argument("--workers", type=int, default=1)
    _add_seed(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("debias", help="fit a fairstyle tensor")
    _add_generator(p)
    p.add_argument("--attributes", default="")
    p.add_argument("--channels", default="auto", help='"auto" or "(i,j);(k,l)"')
    p.add_argument("--direction", help="JSON list of {layer, channel, weight}")
    p.add_argument("--n", type=int, default=128, help="batch size per iteration")
    p.add_argument("--stats-n", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--step", type=float, default=0.05, help="finite-difference step")
    p.add_argument("--policy", choices=[FRESH, FIXED], default=FRESH)
    p.add_argument("--hard", action="store_true", help="take gradients of the hard-label loss")
    p.add_argument("--discovery-batch-size", type=int, default=128)
    p.add_argument("--perturbation", type=float, default=10.0)
    p.add_argument("--exclude-last-blocks", type=int, default=4)
    _add_seed(p)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_debias)

    p = sub.add_parser("audit", help="marginal/joint distributions and KL to uniform")
    _add_generator(p)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--attributes", default="")
    p.add_argument("--joint", action="append", default=[], help="e.g. male+eyeglasses")
    p.add_argument("--tensor")
    _add_seed(p)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--fid-command", help="external scorer, called as CMD IMAGES REFERENCE")
    p.add_argument("--fid-images")
    p.add_argument("--fid-reference")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("sample", help="write images and a manifest")
    _add_generator(p)
    p.add_argument("--tensor")
    p.add_argument("--n", type=int, default=16)
    _add_seed(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("pipeline", help="discover -> debias -> audit from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FairStyleError as exc:
        print(json.dumps(exc.to_json()), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
