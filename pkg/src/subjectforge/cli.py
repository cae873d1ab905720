"""Command-line entry point.

Subcommands: ``forge``, ``augment``, ``select``, ``eval``, ``stats`` and
``validate``. Exit status is 0 on success, 1 on a domain failure (nothing
retained, invalid records, failed stages) and 2 on usage or configuration
errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .augmentor import load_vocabulary, reduce_subjects
from .config import build_config, load_config_file, parse_injections
from .errors import ConfigError, InvalidArgument, ManifestCorrupt, RecordValidationError, SubjectForgeError
from .evalkit import evaluate, mean_layout_agreement, render_report, report_json
from .gateway import MockBackend, ModelGateway
from .imaging import load_png, save_png
from .layout import parse_layout
from .pipeline import forge, make_gateway, rebuild_stats
from .store import append_record, iter_manifest, read_manifest, report_stats, validate_record
from .tts import GatewayGenerator, MockGenerator, MockPlanner, best_score_curve, generate_branches
from .tts import realize_and_score, select_best

logger = logging.getLogger("subjectforge")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class JsonFormatter(logging.Formatter):
    """One JSON object per log event."""

    _SKIP = set(logging.LogRecord("", 0, "", 0, "", None, None).__dict__) | {"message", "asctime"}

    def format(self, record: logging.LogRecord) -> str:
        doc = {"level": record.levelname, "logger": record.name, "message": record.getMessage()}
        for key, value in record.__dict__.items():
            if key not in self._SKIP:
                doc[key] = value
        return json.dumps(doc, sort_keys=True, default=str)


def _setup_logging(args) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if getattr(args, "log_json", False):
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("subjectforge")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING)


def _config_from_args(args, extra: dict | None = None):
    file_values = load_config_file(Path(args.config)) if getattr(args, "config", None) else {}
    overrides = {"global_seed": getattr(args, "seed", None), "backend": getattr(args, "backend", None)}
    overrides.update(extra or {})
    return build_config(file_values, overrides)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--backend", choices=["mock", "live"], help="model backends")
    p.add_argument("--log-json", action="store_true", help="emit one JSON object per log event")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subjectforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="synthesize training records")
    _add_common(p)
    p.add_argument("--vocabulary", help="category list, one per line")
    p.add_argument("--out", help="output root (manifest, images, stats)")
    p.add_argument("--scenes", type=int, default=100, help="number of scenes to attempt")
    p.add_argument("--n-min", type=int)
    p.add_argument("--n-max", type=int)
    p.add_argument("--delta", type=float, help="area floor as a fraction of the target area")
    p.add_argument("--grid", type=int, dest="M", help="layout grid side M")
    p.add_argument("--lambda", type=float, dest="lam", help="dynamic threshold scale")
    p.add_argument("--pooled", action="store_const", const=True, help="one threshold per image")
    p.add_argument("--complex-prob", type=float)
    p.add_argument("--with-ids-ratio", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--cot-min-words", type=int)
    p.add_argument("--inject", action="append", metavar="STAGE=RATE",
                   help="mock failure rate for a stage (repeatable)")

    p = sub.add_parser("augment", help="derive fewer-subject records from a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="derived manifest (default: augmented.jsonl next to --manifest)")
    p.add_argument("--instruction-only", action="store_true",
                   help="rewrite only the instruction; reasoning text just gets its ids renumbered")

    p = sub.add_parser("select", help="best-of-N plan selection")
    _add_common(p)
    p.add_argument("--n", type=int, choices=[2, 4, 8, 16], default=8)
    p.add_argument("--instruction", required=True, help="text file with the user instruction")
    p.add_argument("--subjects", required=True, help="directory of subject PNGs")
    p.add_argument("--categories", help="comma-separated subject categories (default: file stems)")
    p.add_argument("--out", default="select_out", help="directory for branch images")

    p = sub.add_parser("eval", help="embedding metrics over an evaluation manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="JSONL rows {generated, references, instruction, subject_count}")
    p.add_argument("--layouts", help="JSONL rows {predicted, reference} of layout prompt texts")
    p.add_argument("--out", help="write the JSON report here")

    p = sub.add_parser("stats", help="per-stage failure table of a forge run")
    p.add_argument("--run", required=True, help="forge output root")
    p.add_argument("--json", action="store_true", help="print JSON instead of the table")
    p.add_argument("--log-json", action="store_true")

    p = sub.add_parser("validate", help="re-check every record of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--log-json", action="store_true")
    return parser


def cmd_forge(args) -> int:
    extra = {k: getattr(args, k) for k in ("n_min", "n_max", "delta", "M", "lam", "pooled", "complex_prob",
                                           "with_ids_ratio", "workers", "cot_min_words")}
    extra["vocabulary_path"] = args.vocabulary
    extra["output_root"] = args.out
    if args.inject:
        extra["inject"] = parse_injections(args.inject)
    config = _config_from_args(args, extra)
    if not config.vocabulary_path:
        raise ConfigError("no vocabulary given (--vocabulary or vocabulary_path)")
    if args.scenes < 0:
        raise ConfigError("--scenes must be >= 0")
    try:
        vocabulary = load_vocabulary(Path(config.vocabulary_path))
    except OSError as exc:
        raise ConfigError(f"cannot read vocabulary: {exc}") from exc
    except InvalidArgument as exc:
        raise ConfigError(f"bad vocabulary: {exc}") from exc
    if len(vocabulary) < 2 * config.n_max:
        raise ConfigError(f"vocabulary has {len(vocabulary)} categories, need at least {2 * config.n_max}")
    result = forge(config, vocabulary, args.scenes)
    print(report_stats(result.stats))
    print(f"manifest: {result.manifest} ({result.retained} records)")
    if result.interrupted:
        print("interrupted; re-run the same command to resume", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK if result.retained >= 1 else EXIT_FAIL


def cmd_augment(args) -> int:
    config = _config_from_args(args)
    rewrite_cot = config.reduce_rewrite_cot and not args.instruction_only
    manifest = Path(args.manifest)
    if not manifest.exists():
        raise ConfigError(f"manifest {manifest} not found")
    out = Path(args.out) if args.out else manifest.with_name("augmented.jsonl")
    done = {r.scene_id for r in read_manifest(out)} if out.exists() else set()
    written = 0
    for _, record in iter_manifest(manifest):
        for derived in reduce_subjects(record, rewrite_cot=rewrite_cot):
            if derived.scene_id in done:
                continue
            append_record(out, derived)
            written += 1
    print(f"{written} derived records appended to {out}")
    return EXIT_OK


def cmd_select(args) -> int:
    config = _config_from_args(args)
    instruction = Path(args.instruction).read_text(encoding="utf-8").strip()
    if not instruction:
        raise ConfigError("instruction file is empty")
    paths = sorted(Path(args.subjects).glob("*.png"))
    if not paths:
        raise ConfigError(f"no PNG files in {args.subjects}")
    if args.categories:
        categories = [c.strip() for c in args.categories.split(",") if c.strip()]
    else:
        categories = [" ".join(p.stem.replace("_", " ").split()) for p in paths]
    images = [load_png(p) for p in paths]
    gateway = make_gateway(config)
    planner = MockPlanner(categories, M=config.M, lam=config.lam)
    generator = MockGenerator() if config.backend == "mock" else GatewayGenerator(gateway, config.global_seed)
    candidates = generate_branches(planner, instruction, images, args.n, config.global_seed)
    scored = realize_and_score(candidates, generator, gateway, instruction)
    index, best = select_best(scored)
    out = Path(args.out)
    for c in scored:
        if c.image is not None:
            save_png(c.image, out / f"branch_{c.branch_index:02d}.png")
    doc = {
        "chosen_index": index,
        "chosen_image": str(out / f"branch_{index:02d}.png"),
        "scores": [c.score for c in scored],
        "failed_branches": [c.branch_index for c in scored if c.failed],
        "best_score_curve": {str(n): s for n, s in best_score_curve(scored).items()},
    }
    print(json.dumps(doc, indent=2))
    return EXIT_OK if not doc["failed_branches"] else EXIT_FAIL


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    manifest = Path(args.manifest)
    try:
        rows = [json.loads(line) for line in manifest.read_text(encoding="utf-8").splitlines() if line.strip()]
    except OSError as exc:
        raise ConfigError(f"cannot read {manifest}: {exc}") from exc
    emb_a = make_gateway(config)
    if config.backend == "mock":
        emb_b = ModelGateway(MockBackend(config.global_seed + 1, embed_dim=config.mock_embed_dim))
    else:
        emb_b = emb_a
    report = evaluate(rows, {"a": emb_a, "b": emb_b}, base=manifest.parent)
    layout = None
    if args.layouts:
        pairs = []
        for line in Path(args.layouts).read_text(encoding="utf-8").splitlines():
            if line.strip():
                doc = json.loads(line)
                pairs.append((parse_layout(doc["predicted"]), parse_layout(doc["reference"])))
        layout = mean_layout_agreement(pairs)
    print(render_report(report, layout))
    if args.out:
        Path(args.out).write_text(report_json(report, layout) + "\n", encoding="utf-8")
    return EXIT_OK if report.skipped == 0 and report.samples else EXIT_FAIL


def cmd_stats(args) -> int:
    root = Path(args.run)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a forge output directory")
    stats = rebuild_stats(root)
    if args.json:
        print(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
    else:
        print(report_stats(stats))
    return EXIT_OK


def cmd_validate(args) -> int:
    manifest = Path(args.manifest)
    if not manifest.is_file():
        print(f"cannot read manifest {manifest}", file=sys.stderr)
        return EXIT_USAGE
    count = 0
    try:
        for line_no, record in iter_manifest(manifest):
            try:
                validate_record(record)
            except RecordValidationError as exc:
                print(f"{manifest}:{line_no}: scene {record.scene_id}: {exc}", file=sys.stderr)
                return EXIT_FAIL
            count += 1
    except ManifestCorrupt as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    if count == 0:
        print(f"warning: {manifest} holds no records", file=sys.stderr)
    print(f"{count} records valid")
    return EXIT_OK


COMMANDS = {
    "forge": cmd_forge,
    "augment": cmd_augment,
    "select": cmd_select,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    _setup_logging(args)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ManifestCorrupt as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    except SubjectForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
