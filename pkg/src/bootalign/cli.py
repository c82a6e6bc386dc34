"""Command-line driver.

Exit codes: 0 legitimate (or success), 3 malicious, 1 operational error,
2 usage error, 4 unknown application.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .aligner import PRESETS as SCHEME_PRESETS
from .aligner import ScoringScheme, get_scheme
from .ensemble import PoisoningError, ReferenceStore, UnknownAppError
from .harness import (DEFAULT_CONFIDENCE_GRID, DEFAULT_LENGTH_GRID, SWEEP_CONFIDENCE_LENGTH,
                      Config, EvaluationReport, StageError, analyze, evaluation_table,
                      export_score_matrix, sweep_confidence, sweep_length)
from .synth import PRESETS as CORPUS_PRESETS
from .synth import generate_corpus, load_corpus, write_corpus
from .syscall_trace import (LABELS, Alphabet, ParseDiagnostics, build_alphabet, encode,
                            parse_strace, preprocess, read_sequence, write_sequence)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MALICIOUS = 3
EXIT_UNKNOWN_APP = 4

log = logging.getLogger("bootalign")


class UsageError(Exception):
    pass


def _scheme_arg(value: str) -> ScoringScheme:
    if value in SCHEME_PRESETS:
        return SCHEME_PRESETS[value]
    path = Path(value)
    if path.is_file():
        return get_scheme(json.loads(path.read_text()))
    raise argparse.ArgumentTypeError(
        f"{value!r} is neither a preset ({', '.join(sorted(SCHEME_PRESETS))}) nor a JSON file")


def _global_flags() -> argparse.ArgumentParser:
    # SUPPRESS defaults let the flags appear before or after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="JSON config file")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="bagging / corpus seed")
    g.add_argument("--max-len", type=int, default=argparse.SUPPRESS, help="truncation length")
    g.add_argument("--confidence", type=float, default=argparse.SUPPRESS,
                   help="decision threshold I (malicious iff p < I)")
    g.add_argument("--scheme", type=_scheme_arg, default=argparse.SUPPRESS,
                   help="scoring preset name or JSON file")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def _config(args) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    seed = getattr(args, "seed", None)
    cfg = cfg.with_changes(
        max_len=getattr(args, "max_len", None),
        confidence=getattr(args, "confidence", None),
        scheme=getattr(args, "scheme", None),
        store=str(args.store) if getattr(args, "store", None) else None,
        workers=getattr(args, "workers", None),
        plan=replace(cfg.plan, seed=seed) if seed is not None else None,
    )
    return cfg


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _emit_report(report: EvaluationReport, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(report.to_csv())
        json.dump(report.echo(), sys.stderr, sort_keys=True)
        sys.stderr.write("\n")
    else:
        report.write(out)


# -- subcommands -----------------------------------------------------------------

def cmd_ingest(args) -> int:
    diag = ParseDiagnostics()
    with open(args.trace, encoding="utf-8", errors="replace") as fh:
        events = parse_strace(fh, strict=args.strict, diagnostics=diag)
    if args.alphabet:
        alphabet = Alphabet.load(args.alphabet)
    else:
        alphabet = build_alphabet(sorted({e.name for e in events}))
    seq = encode(events, alphabet, app_id=args.app, device_id=args.device, label=args.label)
    if args.preprocess:
        seq = preprocess(seq, _config(args).max_len)
    write_sequence(seq, args.output)
    info = {"events": diag.events, "skipped": diag.skipped, "lines": diag.lines,
            "malformed": diag.malformed_lines, "symbols": len(seq)}
    print(json.dumps(info, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_store_add(args) -> int:
    root = Path(args.store)
    if (root / "alphabet.txt").exists():
        store = ReferenceStore.load(root, args.capacity)
    elif args.alphabet:
        store = ReferenceStore(Alphabet.load(args.alphabet), args.capacity or 150)
    else:
        raise UsageError("new store needs --alphabet")
    max_len = _config(args).max_len
    for path in args.sequences:
        seq = read_sequence(path, store.alphabet)
        app = args.app or seq.app_id
        if not app:
            raise UsageError(f"{path}: no app id in header; pass --app")
        store.add(app, preprocess(seq, max_len), verified=args.verified)
    store.save(root)
    print(json.dumps(store.stats(), sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    if not cfg.store:
        raise UsageError("analyze needs --store or a config with a store path")
    result = analyze(args.sequence, args.app, cfg)
    print(json.dumps(result.record(), sort_keys=True))
    if args.dump_vectors:
        args.dump_vectors.write_text(json.dumps(result.vectors()) + "\n")
    return EXIT_MALICIOUS if result.verdict.label == "malicious" else EXIT_OK


def cmd_cross_validate(args) -> int:
    cfg = _config(args)
    _emit_report(evaluation_table(load_corpus(args.corpus), cfg), args.output)
    return EXIT_OK


def cmd_sweep_confidence(args) -> int:
    cfg = _config(args)
    report = sweep_confidence(load_corpus(args.corpus), args.values or DEFAULT_CONFIDENCE_GRID,
                              args.length, cfg)
    _emit_report(report, args.output)
    return EXIT_OK


def cmd_sweep_length(args) -> int:
    cfg = _config(args)
    report = sweep_length(load_corpus(args.corpus), args.lengths or DEFAULT_LENGTH_GRID, cfg)
    _emit_report(report, args.output)
    return EXIT_OK


def cmd_export_matrix(args) -> int:
    cfg = _config(args)
    if args.corpus:
        if not args.app:
            raise UsageError("--corpus needs --app")
        corpus = load_corpus(args.corpus)
        samples = corpus.samples[args.app][args.label]
    else:
        if not args.alphabet:
            raise UsageError("sequence files need --alphabet")
        alphabet = Alphabet.load(args.alphabet)
        samples = [read_sequence(p, alphabet) for p in args.sequences]
    samples = [preprocess(s, cfg.max_len) for s in samples]
    _emit(export_score_matrix(samples, cfg.scheme), args.output)
    return EXIT_OK


def cmd_synth(args) -> int:
    cc = CORPUS_PRESETS[args.preset]
    changes = {k: getattr(args, k) for k in ("profiles", "legitimate", "malicious")
               if getattr(args, k) is not None}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "max_len", None) is not None:
        changes["max_len"] = args.max_len
    corpus = generate_corpus(replace(cc, **changes))
    write_corpus(corpus, args.output)
    print(json.dumps({"fingerprint": corpus.fingerprint(), "apps": len(corpus.apps())}))
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import serve

    cfg = _config(args)
    if not cfg.store:
        raise UsageError("serve needs --store or a config with a store path")
    serve(cfg, args.host, args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    p = argparse.ArgumentParser(prog="bootalign", parents=[common],
                                description="Boot-sequence alignment malware detector")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(func=fn)
        return sp

    sp = add("ingest", cmd_ingest, "convert an strace log to a sequence file")
    sp.add_argument("trace", type=Path)
    sp.add_argument("-o", "--output", type=Path, required=True)
    sp.add_argument("--app", default="")
    sp.add_argument("--device", default="")
    sp.add_argument("--label", choices=LABELS, default="unknown")
    sp.add_argument("--alphabet", type=Path, help="map names through this alphabet")
    sp.add_argument("--strict", action="store_true", help="fail on malformed lines")
    sp.add_argument("--preprocess", action="store_true", help="collapse runs and truncate")

    sp = sub.add_parser("store", parents=[common], help="manage the reference store")
    ssub = sp.add_subparsers(dest="store_command", required=True)
    sa = ssub.add_parser("add", parents=[common], help="add verified legitimate sequences")
    sa.set_defaults(func=cmd_store_add)
    sa.add_argument("sequences", nargs="+", type=Path)
    sa.add_argument("--store", type=Path, required=True)
    sa.add_argument("--app", help="override the app id in the sequence headers")
    sa.add_argument("--alphabet", type=Path, help="alphabet for a new store")
    sa.add_argument("--capacity", type=int)
    sa.add_argument("--verified", action="store_true",
                    help="confirm the sequences were verified clean")

    sp = add("analyze", cmd_analyze, "classify one sequence file")
    sp.add_argument("sequence", type=Path)
    sp.add_argument("--app", required=True)
    sp.add_argument("--store", type=Path)
    sp.add_argument("--dump-vectors", type=Path, help="write the paired score vectors as JSON")

    for name, fn, help in (("cross-validate", cmd_cross_validate, "per-app TPR/FPR table"),
                           ("sweep-confidence", cmd_sweep_confidence, "TPR/FPR across I"),
                           ("sweep-length", cmd_sweep_length, "TPR/FPR across boot lengths")):
        sp = add(name, fn, help)
        sp.add_argument("corpus", type=Path)
        sp.add_argument("-o", "--output", type=Path, help="CSV path (a .json echo goes beside it)")
        sp.add_argument("--workers", type=int)
        if name == "sweep-confidence":
            sp.add_argument("--values", type=float, nargs="+")
            sp.add_argument("--length", type=int, default=SWEEP_CONFIDENCE_LENGTH)
        elif name == "sweep-length":
            sp.add_argument("--lengths", type=int, nargs="+")

    sp = add("export-matrix", cmd_export_matrix, "pairwise score matrix as CSV")
    sp.add_argument("sequences", nargs="*", type=Path)
    sp.add_argument("--alphabet", type=Path)
    sp.add_argument("--corpus", type=Path)
    sp.add_argument("--app")
    sp.add_argument("--label", choices=("legitimate", "malicious"), default="legitimate")
    sp.add_argument("-o", "--output", type=Path)

    sp = add("synth", cmd_synth, "generate a synthetic labelled corpus")
    sp.add_argument("output", type=Path)
    sp.add_argument("--preset", choices=sorted(CORPUS_PRESETS), default="small")
    sp.add_argument("--profiles", type=int)
    sp.add_argument("--legitimate", type=int)
    sp.add_argument("--malicious", type=int)

    sp = add("serve", cmd_serve, "run the HTTP analysis service")
    sp.add_argument("--store", type=Path)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8080)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bootalign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnknownAppError as exc:
        print(f"bootalign: unknown app {exc.args[0]!r}: no reference samples", file=sys.stderr)
        return EXIT_UNKNOWN_APP
    except StageError as exc:
        print(f"bootalign: {exc.stage} stage failed: {exc.message}", file=sys.stderr)
        return EXIT_ERROR
    except (PoisoningError, OSError, ValueError) as exc:
        print(f"bootalign: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
