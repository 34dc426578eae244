"""Command-line entry point.

Machine-readable JSON goes to stdout, logs to stderr. Exit codes:

    0  success (an ``unknown`` prediction is still a success)
    2  configuration error (bad flags, taxonomy, synonym table, mock script)
    3  input error (missing or undecodable image, unreadable annotations)
    4  prediction / annotation image ids do not align
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .backend import HttpConfig, MockScript, load_mock_script, make_http_backend, make_mock_backend
from .engine import RecoveryPolicy, classify, classify_one_shot
from .errors import ConfigError, DecodeError, FormatError, IdMismatch, IntegrityError, UnknownLabel
from .evalkit import evaluate, latency_summary, load_annotations, load_predictions
from .imageio import PreprocessConfig, preprocess
from .ontology import Taxonomy, audit_taxonomy, load_taxonomy
from .textnorm import DEFAULT_TAU, NormalizerConfig, load_synonyms

logger = logging.getLogger("foodtaxo")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_IDS = 0, 2, 3, 4
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    taxonomy: Taxonomy
    backend: object
    policy: RecoveryPolicy
    normalizer: NormalizerConfig
    preprocess: PreprocessConfig
    mixed: bool = False
    max_items: int = 1
    one_shot: bool = False
    workers: int = 1
    out: Path | None = None


def _read_config_file(path, what: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read {what} {path}: {exc.strerror or exc}") from None


def _read_input_file(path, what: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_INPUT, f"cannot read {what} {path}: {exc.strerror or exc}") from None


def _load_taxonomy(path) -> Taxonomy:
    data = _read_config_file(path, "taxonomy")
    try:
        return load_taxonomy(data)
    except FormatError as exc:
        raise CliError(EXIT_CONFIG, f"invalid taxonomy {path}: {exc}") from None


def _make_backend(args):
    if args.backend == "http":
        if not args.endpoint or not args.model:
            raise CliError(EXIT_CONFIG, "--backend http needs --endpoint and --model")
        try:
            return make_http_backend(
                HttpConfig(
                    endpoint=args.endpoint,
                    model=args.model,
                    credential_env=args.credential_env,
                    timeout=args.timeout,
                    transport_retries=args.transport_retries,
                )
            )
        except ConfigError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
    script = MockScript()
    if args.mock_script:
        try:
            script = load_mock_script(_read_config_file(args.mock_script, "mock script"))
        except FormatError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.delay is not None:
        overrides["delay"] = args.delay
    if overrides:
        try:
            script = dataclasses.replace(script, **overrides)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
    return make_mock_backend(script)


def build_run_config(args) -> RunConfig:
    taxonomy = _load_taxonomy(args.taxonomy)
    if args.retries < 0:
        raise CliError(EXIT_CONFIG, "--retries must be >= 0")
    if args.max_items < 1:
        raise CliError(EXIT_CONFIG, "--max-items must be >= 1")
    if args.workers < 1:
        raise CliError(EXIT_CONFIG, "--workers must be >= 1")
    try:
        if args.synonyms:
            normalizer = load_synonyms(_read_config_file(args.synonyms, "synonym table"), taxonomy, tau=args.tau)
        else:
            normalizer = NormalizerConfig(tau=args.tau)
        prep = PreprocessConfig(args.max_side, args.center_crop, args.jpeg_quality)
    except (FormatError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    return RunConfig(
        taxonomy=taxonomy,
        backend=_make_backend(args),
        policy=RecoveryPolicy(args.retries, not args.no_canonical_mapping),
        normalizer=normalizer,
        preprocess=prep,
        mixed=args.mixed,
        max_items=args.max_items if args.mixed else 1,
        one_shot=args.one_shot,
        workers=args.workers,
        out=Path(args.out) if args.out else None,
    )


def _prepare(path, cfg: RunConfig):
    data = _read_input_file(path, "image")
    try:
        return preprocess(data, cfg.preprocess)
    except DecodeError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from None


def _run_one(image, image_id: str, cfg: RunConfig):
    if cfg.one_shot:
        return classify_one_shot(cfg.backend, cfg.taxonomy, image, cfg.normalizer, image_id)
    return classify(
        cfg.backend, cfg.taxonomy, image, cfg.policy, cfg.normalizer, cfg.mixed, cfg.max_items, image_id
    )


def _collect_images(paths) -> list[Path]:
    found: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            found.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        elif p.exists():
            found.append(p)
        else:
            raise CliError(EXIT_INPUT, f"no such image or directory: {p}")
    if not found:
        raise CliError(EXIT_INPUT, "empty image set")
    return found


def _run_set(paths: list[Path], cfg: RunConfig, repeats: int = 1):
    """Classify every image ``repeats`` times; returns records and per-run seconds.

    Images are processed one at a time unless ``--workers`` allows more and
    the backend declares it can take concurrent calls.
    """
    jobs = [(path, rep) for rep in range(repeats) for path in paths]

    def one(job):
        path, _ = job
        start = time.perf_counter()
        image = _prepare(path, cfg)
        record = _run_one(image, path.stem, cfg)
        return record, time.perf_counter() - start

    limit = max(1, min(cfg.workers, getattr(cfg.backend, "max_concurrency", 1)))
    if limit == 1:
        results = [one(job) for job in jobs]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=limit) as pool:
            results = list(pool.map(one, jobs))
    return [r for r, _ in results], [t for _, t in results]


def _emit(obj, out: Path | None = None) -> None:
    text = json.dumps(obj, ensure_ascii=False, indent=None)
    print(text)
    if out is not None:
        out.write_text(text + "\n", encoding="utf-8")


# -- subcommands -------------------------------------------------------------


def cmd_classify(args) -> int:
    cfg = build_run_config(args)
    path = Path(args.image)
    image = _prepare(path, cfg)
    record = _run_one(image, path.stem, cfg)
    print(record.output_json())
    if cfg.out is not None:
        cfg.out.write_text(json.dumps(record.to_dict(), ensure_ascii=False) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_eval(args) -> int:
    if bool(args.predictions) == bool(args.images):
        raise CliError(EXIT_CONFIG, "give exactly one of --predictions or --images")
    taxonomy = _load_taxonomy(args.taxonomy)
    try:
        gold = load_annotations(_read_input_file(args.annotations, "annotations"), taxonomy)
    except (FormatError, UnknownLabel) as exc:
        raise CliError(EXIT_INPUT, f"{args.annotations}: {exc}") from None
    latencies = None
    if args.predictions:
        try:
            records = load_predictions(_read_input_file(args.predictions, "predictions"))
        except FormatError as exc:
            raise CliError(EXIT_INPUT, f"{args.predictions}: {exc}") from None
    else:
        cfg = build_run_config(args)
        records, latencies = _run_set(_collect_images(args.images), cfg)
    try:
        report = evaluate(records, gold, latencies)
    except IdMismatch as exc:
        raise CliError(EXIT_IDS, str(exc)) from None
    _emit(report, Path(args.out) if args.out else None)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.repeats < 1:
        raise CliError(EXIT_CONFIG, "--repeats must be >= 1")
    cfg = build_run_config(args)
    paths = _collect_images(args.images)
    records, latencies = _run_set(paths, cfg, args.repeats)
    calls = [r.backend_calls for r in records]
    report = {
        "mode": "one_shot" if cfg.one_shot else "staged",
        "images": len(paths),
        "repeats": args.repeats,
        "runs": len(records),
        "latency": latency_summary(latencies).to_dict(),
        "backend_calls": {
            "total": sum(calls),
            "mean_per_image": sum(calls) / len(calls),
            "max_per_image": max(calls),
        },
        "unknown_items": sum(1 for r in records for item in r.items if not item.complete),
    }
    _emit(report, cfg.out)
    return EXIT_OK


def cmd_taxonomy_validate(args) -> int:
    path = args.path or args.taxonomy
    if not path:
        raise CliError(EXIT_CONFIG, "give a taxonomy path")
    data = _read_config_file(path, "taxonomy")
    try:
        taxonomy, issues = audit_taxonomy(data)
    except IntegrityError as exc:  # pragma: no cover - audit collects these
        taxonomy, issues = None, exc.issues
    except FormatError as exc:
        print(f"format error: {exc}")
        return EXIT_CONFIG
    if taxonomy is not None:
        counts = taxonomy.counts()
        print(
            f"{counts['category']} categories, {counts['subcategory']} subcategories, "
            f"{counts['cooking_style']} cooking styles"
        )
    for issue in issues:
        print(f"violation: {issue}")
    return EXIT_CONFIG if issues else EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--taxonomy", required=True, help="taxonomy YAML file")
    p.add_argument("--backend", choices=("mock", "http"), default="mock")
    p.add_argument("--endpoint", help="chat-completions URL (http backend)")
    p.add_argument("--model", help="model name (http backend)")
    p.add_argument("--credential-env", default="FOODTAXO_API_KEY", help="environment variable holding the API key")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--transport-retries", type=int, default=0)
    p.add_argument("--mock-script", help="YAML script for the mock backend")
    p.add_argument("--seed", type=int, help="override the mock script seed")
    p.add_argument("--delay", type=float, help="mock per-call delay in seconds")
    p.add_argument("--synonyms", help="synonym table YAML")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--retries", type=int, default=3, help="re-prompts per stage (R)")
    p.add_argument("--no-canonical-mapping", action="store_true")
    p.add_argument("--mixed", action="store_true", help="allow several food items per image")
    p.add_argument("--max-items", type=int, default=3)
    p.add_argument("--one-shot", action="store_true", help="single unconstrained prompt baseline")
    p.add_argument("--max-side", type=int, default=896)
    p.add_argument("--center-crop", action="store_true")
    p.add_argument("--jpeg-quality", type=int, default=90)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="also write the JSON result to this file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foodtaxo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("classify", help="classify one image and print its record")
    p.add_argument("image")
    _add_run_flags(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="score predictions against annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--predictions", help="JSONL prediction records")
    p.add_argument("--images", nargs="+", help="classify these images live instead")
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency and call-count benchmark")
    p.add_argument("images", nargs="*")
    p.add_argument("--repeats", type=int, default=1)
    _add_run_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("taxonomy-validate", help="check a taxonomy file")
    p.add_argument("path", nargs="?")
    p.add_argument("--taxonomy")
    p.set_defaults(func=cmd_taxonomy_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
