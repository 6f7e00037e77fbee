"""Command-line entry point: ``crosscycle <verb> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (unknown verb or flag),
3 configuration or argument validation failure. Errors are printed to stderr as
one line of the form ``error: <kind>: <reason>``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .checkpoint import CheckpointError, read_checkpoint
from .config import Hyperparameters, InvalidArgument, InvalidState, RngStream, sample_attribute_prior, validate_config
from .data import SynthSpec, from_uint8, generate_synthetic, load_image_folder
from .inference import TranslationRequest, interpolate_attributes, translate_random, translate_transfer, write_outputs
from .metrics import FeatureExtractor, evaluate, export_embeddings, write_metric_report
from .networks import encode_attribute
from .training import TrainState, TrainingAborted, latest_checkpoint, read_losses, train

OUT_ENV = "CROSSCYCLE_OUT"
RESOLVED_NAME = "resolved_config.json"
SYNTH_KEYS = {"k": "k", "n": "n_per_domain", "size": "image_size", "grid": "grid"}

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_INVALID = 0, 1, 2, 3


class UsageError(Exception):
    pass


class IncompleteRun(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# configuration ------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _pairs(items, flag):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise InvalidArgument(f"{flag} expects KEY=VALUE, got {item!r}")
        out[key] = _parse_value(value)
    return out


def resolve_config(config_path: str | None, overrides: list[str] | None) -> Hyperparameters:
    """Built-in defaults, then the config file, then ``--set`` flags."""
    values = Hyperparameters().to_dict()
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidArgument(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise InvalidArgument(f"{config_path}: config must be a JSON object")
        values.update(loaded)
    values.update(_pairs(overrides, "--set"))
    hp = Hyperparameters.from_dict(values)
    problems = validate_config(hp)
    if problems:
        raise InvalidArgument("; ".join(f"{k}: {v}" for k, v in problems))
    return hp


def _write_resolved(out: Path, verb: str, seed: int, hp: Hyperparameters | None, options: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"verb": verb, "seed": seed, "options": options,
           "hyperparameters": hp.to_dict() if hp is not None else None}
    (out / RESOLVED_NAME).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


# helpers --------------------------------------------------------------------------

def _load_state(path: str) -> tuple[TrainState, str]:
    p = Path(path)
    if p.is_dir():
        found = latest_checkpoint(p)
        if found is None:
            raise InvalidArgument(f"{path}: no checkpoints found")
        p = found
    if not p.is_file():
        raise InvalidArgument(f"{path}: checkpoint not found")
    header, _ = read_checkpoint(p)
    return TrainState.load(p), header["content_hash"]


def _load_image(path: str, size: int) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return from_uint8(np.asarray(im))
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise InvalidArgument(f"{path}: cannot read image ({exc})") from exc


def _options(args, names):
    return {n: getattr(args, n) for n in names}


# verbs ------------------------------------------------------------------------------

def cmd_dataset(args, out: Path) -> None:
    if not args.synth:
        raise InvalidArgument("dataset requires --synth KEY=VALUE ... (keys: k, n, size, grid)")
    given = _pairs(args.synth, "--synth")
    unknown = sorted(set(given) - set(SYNTH_KEYS))
    if unknown:
        raise InvalidArgument(f"unknown --synth keys: {', '.join(unknown)}")
    fields = {SYNTH_KEYS[k]: v for k, v in given.items()}
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in fields.values()):
        raise InvalidArgument("--synth values must be integers")
    spec = SynthSpec(seed=args.seed, **fields)
    _write_resolved(out, "dataset", args.seed, None, {"synth": dict(sorted(fields.items()))})
    generate_synthetic(spec, out)


def cmd_train(args, out: Path) -> None:
    hp = resolve_config(args.config, args.set)
    _write_resolved(out, "train", args.seed, hp, _options(args, ["data", "resume"]))
    dataset = load_image_folder(args.data, hp.image_size)
    path = train(hp, dataset, out, seed=args.seed, resume=args.resume)
    print(path.relative_to(out).as_posix())


def cmd_translate(args, out: Path) -> None:
    request = TranslationRequest("random", args.input, args.source_domain, args.target_domain, args.seed,
                                 n_samples=args.n)
    _write_resolved(out, "translate", args.seed, None, _options(
        args, ["checkpoint", "input", "source_domain", "target_domain", "n"]))
    state, digest = _load_state(args.checkpoint)
    request.validate(state.models.k)
    x = _load_image(args.input, state.hp.image_size)
    images = translate_random(state.models, x, args.source_domain, args.target_domain, args.n,
                              RngStream(args.seed, "translate"))
    write_outputs(images, out, request, digest)


def cmd_transfer(args, out: Path) -> None:
    request = TranslationRequest("transfer", args.input, args.source_domain, args.attribute_domain, args.seed,
                                 attribute_source=args.attribute)
    _write_resolved(out, "transfer", args.seed, None, _options(
        args, ["checkpoint", "input", "source_domain", "attribute", "attribute_domain"]))
    state, digest = _load_state(args.checkpoint)
    request.validate(state.models.k)
    size = state.hp.image_size
    image = translate_transfer(state.models, _load_image(args.input, size), args.source_domain,
                               _load_image(args.attribute, size), args.attribute_domain)
    write_outputs([image], out, request, digest)


def cmd_interpolate(args, out: Path) -> None:
    _write_resolved(out, "interpolate", args.seed, None, _options(
        args, ["checkpoint", "input", "source_domain", "target_domain", "steps", "endpoints"]))
    state, digest = _load_state(args.checkpoint)
    size = state.hp.image_size
    if args.endpoints:
        # attribute means of two target-domain images
        a1, a2 = (encode_attribute(state.models, _load_image(p, size)[None], args.target_domain)[0][0].detach()
                  for p in args.endpoints)
        endpoints = list(args.endpoints)
    else:
        a1, a2 = sample_attribute_prior(state.hp.attribute_dim, RngStream(args.seed, "interpolate"), 2)
        endpoints = [a1.tolist(), a2.tolist()]
    request = TranslationRequest("interpolate", args.input, args.source_domain, args.target_domain, args.seed,
                                 endpoints=endpoints, steps=args.steps)
    request.validate(state.models.k)
    x = _load_image(args.input, size)
    frames = interpolate_attributes(state.models, x, args.source_domain, args.target_domain, a1, a2, args.steps)
    write_outputs(frames, out, request, digest)


def cmd_evaluate(args, out: Path) -> None:
    _write_resolved(out, "evaluate", args.seed, None, _options(
        args, ["checkpoint", "data", "n_samples", "bins", "features", "max_inputs", "source", "target"]))
    state, digest = _load_state(args.checkpoint)
    dataset = load_image_folder(args.data, state.hp.image_size)
    extractor = FeatureExtractor.from_csv(args.features) if args.features else FeatureExtractor(seed=args.seed)
    metrics = evaluate(state.models, dataset, extractor, n_samples=args.n_samples, seed=args.seed, K=args.bins,
                       source=args.source, target=args.target, max_inputs=args.max_inputs)
    write_metric_report(out / "metrics.json", metrics, state.hp.to_dict(),
                        {"evaluate": args.seed, "train": state.seed}, digest)


def cmd_embed(args, out: Path) -> None:
    _write_resolved(out, "embed", args.seed, None, _options(args, ["checkpoint", "data"]))
    state, _ = _load_state(args.checkpoint)
    dataset = load_image_folder(args.data, state.hp.image_size)
    export_embeddings(state.models, dataset, out / "embeddings.csv")


def cmd_report(args, out: Path) -> None:
    _write_resolved(out, "report", args.seed, None, _options(args, ["run"]))
    text = reproduce_report(args.run)
    (out / "report.md").write_text(text)


# report ---------------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def reproduce_report(run_dir) -> str:
    """Markdown summary of a finished run: config, final losses, metrics and sample grids.

    Paths are relative to ``run_dir`` and nothing time-dependent is included, so
    two runs with the same seed produce identical text.
    """
    run = Path(run_dir)
    for required in ("config.json", "losses.csv"):
        if not (run / required).is_file():
            raise IncompleteRun(f"{run}: incomplete run, missing {required}")
    config = json.loads((run / "config.json").read_text())
    losses = read_losses(run)
    if not losses:
        raise IncompleteRun(f"{run}: incomplete run, losses.csv has no rows")
    lines = ["# Run summary", "", "## Configuration", "", "| key | value |", "| --- | --- |"]
    lines += [f"| {k} | {_fmt(v)} |" for k, v in sorted(config.items())]
    final = losses[-1]
    lines += ["", f"## Final losses (step {int(final['step'])})", "", "| term | value |", "| --- | --- |"]
    lines += [f"| {k} | {_fmt(v)} |" for k, v in final.items() if k != "step"]
    reports = sorted(run.rglob("metrics.json"))
    lines += ["", "## Metrics", ""]
    if not reports:
        lines.append("No metrics.json found; run `crosscycle evaluate` with `--out` inside the run directory.")
    for path in reports:
        metrics = json.loads(path.read_text())["metrics"]
        lines += [f"### {path.relative_to(run).as_posix()}", "", "| metric | value |", "| --- | --- |"]
        lines += [f"| {k} | {_fmt(v)} |" for k, v in sorted(metrics.items())]
        lines.append("")
    grids = sorted((run / "samples").glob("step_*.png"), key=lambda p: int(p.stem.split("_")[1]))
    lines += ["", "## Sample grids", ""]
    lines += [f"- {p.relative_to(run).as_posix()}" for p in grids] or ["none"]
    return "\n".join(lines).rstrip() + "\n"


# parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of hyperparameters (overrides built-in defaults)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one hyperparameter; repeatable, wins over --config")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs, plus the verb name)")

    parser = _Parser(prog="crosscycle", description="Disentangled unpaired image-to-image translation.")
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser, metavar="verb")

    p = sub.add_parser("dataset", parents=[common], help="generate the synthetic shapes dataset")
    p.add_argument("--synth", nargs="+", metavar="KEY=VALUE", help="k=<domains> n=<per domain> size=<px> grid=<cells>")

    p = sub.add_parser("train", parents=[common], help="train a model on an image folder")
    p.add_argument("--data", required=True, help="dataset root with domain_i/ (or trainA/trainB) folders")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")

    def add_checkpoint(p):
        p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory (latest is used)")

    p = sub.add_parser("translate", parents=[common], help="random-attribute translations of one image")
    add_checkpoint(p)
    p.add_argument("--input", required=True, help="source image (PNG)")
    p.add_argument("--source-domain", type=int, default=0, help="domain of the input image")
    p.add_argument("--target-domain", type=int, default=1, help="domain to translate into")
    p.add_argument("-n", "--n", type=int, default=5, help="number of samples")

    p = sub.add_parser("transfer", parents=[common], help="render one image's content with another's attribute")
    add_checkpoint(p)
    p.add_argument("--input", required=True, help="content image (PNG)")
    p.add_argument("--source-domain", type=int, default=0, help="domain of the content image")
    p.add_argument("--attribute", required=True, help="attribute image (PNG)")
    p.add_argument("--attribute-domain", type=int, default=1, help="domain of the attribute image and output")

    p = sub.add_parser("interpolate", parents=[common], help="walk between two prior attribute draws")
    add_checkpoint(p)
    p.add_argument("--input", required=True, help="source image (PNG)")
    p.add_argument("--source-domain", type=int, default=0, help="domain of the input image")
    p.add_argument("--target-domain", type=int, default=1, help="domain to translate into")
    p.add_argument("--steps", type=int, default=8, help="number of frames including both endpoints")
    p.add_argument("--endpoints", nargs=2, metavar="IMG",
                   help="two target-domain images whose attribute means are the endpoints "
                        "(default: two prior draws from --seed)")

    p = sub.add_parser("evaluate", parents=[common], help="FID, diversity, NDB/JSD, content distance, probes")
    add_checkpoint(p)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--n-samples", type=int, default=10, help="random translations per input image")
    p.add_argument("--bins", type=int, default=10, help="number of K-means bins for NDB/JSD")
    p.add_argument("--features", help="CSV of precomputed features keyed by image name")
    p.add_argument("--max-inputs", type=int, help="cap on the number of source images")
    p.add_argument("--source", type=int, default=0, help="source domain")
    p.add_argument("--target", type=int, default=1, help="target domain")

    p = sub.add_parser("embed", parents=[common], help="export content codes as CSV")
    add_checkpoint(p)
    p.add_argument("--data", required=True, help="dataset root")

    p = sub.add_parser("report", parents=[common], help="markdown summary of a run directory")
    p.add_argument("--run", required=True, help="run directory produced by train")
    return parser


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "translate": cmd_translate, "transfer": cmd_transfer,
            "interpolate": cmd_interpolate, "evaluate": cmd_evaluate, "embed": cmd_embed, "report": cmd_report}


def _fail(code: int, kind: str, exc) -> int:
    message = " ".join(str(exc).split())
    print(f"error: {kind}: {message}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verb is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / args.verb
    try:
        COMMANDS[args.verb](args, out)
    except (InvalidArgument, CheckpointError) as exc:
        return _fail(EXIT_INVALID, "invalid", exc)
    except (IncompleteRun, InvalidState, TrainingAborted, OSError, RuntimeError) as exc:
        return _fail(EXIT_RUNTIME, "runtime", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
