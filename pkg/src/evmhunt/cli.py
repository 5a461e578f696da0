"""Command-line entry point: ``evmhunt <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors and 2 for data errors
(unreadable or malformed inputs).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .avp import ScoreConfig, VulnClass, default_tables, load_tables, matched_chains, score_nodes
from .cfg import build_cfg
from .disasm import ContractBytecode, HexFormatError, disassemble, strip_trailing_metadata
from .embed import SkipGramConfig, build_vocab, train_skipgram
from .harness import (
    DataError,
    Model,
    TrainConfig,
    dump_features,
    evaluate,
    export_report,
    load_dataset,
    predict_contract,
    split_dataset,
    train,
    write_dataset,
)
from .synth import SynthConfig, synth_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

log = logging.getLogger("evmhunt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="random seed (default 42)")
    p.add_argument("--config", default=d, help="JSON file mirroring the training config")
    p.add_argument("--vuln", default=d, help="vulnerability class (default reentrancy)")
    p.add_argument("-v", "--verbose", action="store_true", default=d)


# -- helpers -------------------------------------------------------------------


def _read_code(path: str, strip: bool = False) -> ContractBytecode:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{path}: no such file")
    code = ContractBytecode.from_file(p)
    return strip_trailing_metadata(code) if strip else code


def _vuln(args) -> VulnClass:
    try:
        return VulnClass.parse(args.vuln or "reentrancy")
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _tables(args):
    path = getattr(args, "tables", None)
    if not path:
        return default_tables()
    try:
        return load_tables(path)
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _train_config(args) -> TrainConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{args.config}: {exc}") from None
    try:
        cfg = TrainConfig.from_dict(data)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.vuln is not None:
            cfg = replace(cfg, vuln_class=VulnClass.parse(args.vuln))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None
    return cfg


def _dataset(args, vuln: VulnClass | None):
    root = Path(args.data)
    bytecode = Path(args.bytecode) if args.bytecode else root / "bytecode"
    labels = Path(args.labels) if args.labels else root / "labels.csv"
    teacher = args.teacher
    if teacher is None and (root / "teacher.txt").exists():
        teacher = root / "teacher.txt"
    if not labels.is_file():
        raise DataError(f"{labels}: labels file not found")
    if not bytecode.is_dir():
        raise DataError(f"{bytecode}: bytecode directory not found")
    records = load_dataset(bytecode, labels, teacher, vuln)
    if not records:
        raise DataError(f"{labels}: no labelled contracts for class {vuln.value if vuln else '*'}")
    return records


def _select(records, args, seed: int):
    if not args.val_frac:
        return records
    tr, va = split_dataset(records, args.val_frac, seed)
    return va if args.split == "val" else tr


def _load_model(path: str) -> Model:
    try:
        return Model.load(path)
    except FileNotFoundError:
        raise DataError(f"{path}: no such checkpoint") from None
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _metrics_line(m) -> str:
    return (
        f"acc={m.accuracy:.4f} re={m.recall:.4f} pre={m.precision:.4f} f1={m.f1:.4f} "
        f"tp={m.tp} fp={m.fp} tn={m.tn} fn={m.fn}"
    )


def _hex_files(directory: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{directory}: not a directory")
    return sorted(d.glob("*.hex"))


# -- subcommands ----------------------------------------------------------------


def cmd_disasm(args) -> int:
    for ins in disassemble(_read_code(args.file, args.strip_metadata)):
        line = str(ins)
        print(line + "  ; truncated" if ins.truncated else line)
    return EXIT_OK


def cmd_cfg(args) -> int:
    code = _read_code(args.file, args.strip_metadata)
    g = build_cfg(code)
    if args.format == "dot":
        print(g.to_dot(code.id or "cfg"))
    else:
        print(json.dumps(g.to_json(), indent=2))
    return EXIT_OK


def cmd_match(args) -> int:
    cls = _vuln(args)
    try:
        score_cfg = ScoreConfig(xi=args.xi, nu=args.nu, l=args.l)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    table = _tables(args)[cls]
    g = build_cfg(_read_code(args.file, args.strip_metadata))
    scores = score_nodes(g, table, score_cfg)
    chains = matched_chains(g, table, args.l)
    if args.json:
        print(json.dumps({
            "class": cls.value,
            "nodes": [
                {"index": b.index, "offset": b.start_offset, "score": float(s), "matched": bool(m)}
                for b, s, m in zip(g.blocks, scores.scores, scores.matched)
            ],
            "chains": chains,
        }, indent=2))  # fmt: skip
        return EXIT_OK
    print(f"# class={cls.value} l={args.l} xi={args.xi} nu={args.nu}")
    for b, s, m in zip(g.blocks, scores.scores, scores.matched):
        print(f"B{b.index} @{b.start_offset:04x} score={s:g}{'  matched' if m else ''}")
    for c in chains:
        print("chain " + " -> ".join(f"B{i}" for i in c))
    return EXIT_OK


def cmd_triage(args) -> int:
    tables = _tables(args)
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["id", "candidates"])
        for path in _hex_files(args.dir):
            g = build_cfg(_read_code(str(path), args.strip_metadata))
            found = sorted(
                c.value for c, t in tables.items() if score_nodes(g, t, ScoreConfig(l=args.l)).matched.any()
            )
            w.writerow([path.stem, ";".join(found)])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_embed_train(args) -> int:
    files = _hex_files(args.corpus)
    if not files:
        raise DataError(f"{args.corpus}: no .hex files")
    corpus = [disassemble(_read_code(str(p))) for p in files]
    cfg = SkipGramConfig(
        dim=args.dim, window=args.window, negatives=args.negatives, epochs=args.epochs,
        lr=args.lr, seed=42 if args.seed is None else args.seed,
    )  # fmt: skip
    emb = train_skipgram(corpus, build_vocab(corpus), cfg)
    emb.save(args.output)
    print(f"wrote {args.output}: |V|={len(emb.vocab)} D={emb.dim}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_pos=args.n_pos, n_neg=args.n_neg, vuln_class=_vuln(args),
        noise_blocks=args.noise_blocks, seed=42 if args.seed is None else args.seed,
    )  # fmt: skip
    records = synth_dataset(cfg)
    write_dataset(records, args.output)
    print(f"wrote {len(records)} contracts to {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    records = _select(_dataset(args, cfg.vuln_class), args, cfg.seed)
    model, history = train(records, cfg, _tables(args)[cfg.vuln_class])
    model.save(args.output)
    if args.log:
        Path(args.log).write_text(json.dumps(
            {"stage_a": history.stage_a, "stage_b": history.stage_b}, indent=2) + "\n")  # fmt: skip
    last = lambda xs: f"{xs[-1]:.4f}" if xs else "-"  # noqa: E731
    print(f"trained on {len(records)} contracts; stage A loss {last(history.stage_a)}, "
          f"stage B loss {last(history.stage_b)}; wrote {args.output}")  # fmt: skip
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    seed = model.config.seed if args.seed is None else args.seed
    records = _select(_dataset(args, model.config.vuln_class), args, seed)
    print(_metrics_line(evaluate(model, records, args.threshold)))
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    code = _read_code(args.file, args.strip_metadata)
    res = predict_contract(model, code)
    print(json.dumps({"id": code.id, "class": model.config.vuln_class.value, **res}))
    return EXIT_OK


def cmd_dump_features(args) -> int:
    model = _load_model(args.model)
    records = _select(_dataset(args, model.config.vuln_class), args, model.config.seed)
    dump_features(model, records, args.output)
    return EXIT_OK


def cmd_report(args) -> int:
    metrics, run_cfg = {}, {}
    for path in args.model:
        model = _load_model(path)
        records = _select(_dataset(args, model.config.vuln_class), args, model.config.seed)
        cls = model.config.vuln_class
        if cls in metrics:
            raise UsageError(f"two models for class {cls.value}")
        metrics[cls] = evaluate(model, records)
        run_cfg[cls.value] = model.config.to_dict()
    seeds = {c["seed"] for c in run_cfg.values()}
    report = export_report(
        metrics, {"seed": seeds.pop() if len(seeds) == 1 else sorted(seeds), "runs": run_cfg},
        args.output,
    )  # fmt: skip
    print("\t".join(report["columns"]))
    for row in report["rows"]:
        print("\t".join([row[0]] + [f"{100 * v:.2f}" for v in row[1:]]))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def _data_args(p: argparse.ArgumentParser, split: bool = True) -> None:
    p.add_argument("data", help="dataset directory (bytecode/, labels.csv, teacher.txt)")
    p.add_argument("--bytecode", help="override the bytecode directory")
    p.add_argument("--labels", help="override the labels CSV")
    p.add_argument("--teacher", help="teacher feature file")
    p.add_argument("--val-frac", type=float, default=0.0,
                   help="hold out this stratified fraction (0 = use everything)")  # fmt: skip
    if split:
        p.add_argument("--split", choices=("train", "val"), default="val",
                       help="which side of the split to use when --val-frac is set")  # fmt: skip


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evmhunt", description="Vulnerability hunting on EVM bytecode.")
    parser.add_argument("--version", action="version", version=f"evmhunt {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    p = add("disasm", cmd_disasm, "disassemble a hex bytecode file")
    p.add_argument("file")
    p.add_argument("--strip-metadata", action="store_true")

    p = add("cfg", cmd_cfg, "recover the control-flow graph")
    p.add_argument("file")
    p.add_argument("--format", choices=("json", "dot"), default="json")
    p.add_argument("--strip-metadata", action="store_true")

    p = add("match", cmd_match, "score nodes against a pattern table")
    p.add_argument("file")
    p.add_argument("--l", type=int, default=2, help="chain depth")
    p.add_argument("--xi", type=float, default=1.0)
    p.add_argument("--nu", type=float, default=0.0)
    p.add_argument("--tables", help="JSON pattern tables")
    p.add_argument("--json", action="store_true")
    p.add_argument("--strip-metadata", action="store_true")

    p = add("triage", cmd_triage, "CSV of candidate classes for every .hex file in a directory")
    p.add_argument("dir")
    p.add_argument("-o", "--output")
    p.add_argument("--l", type=int, default=2)
    p.add_argument("--tables")
    p.add_argument("--strip-metadata", action="store_true")

    p = add("embed-train", cmd_embed_train, "train opcode embeddings on a directory of .hex files")
    p.add_argument("corpus")
    p.add_argument("-o", "--output", required=True)
    d = SkipGramConfig()
    p.add_argument("--dim", type=int, default=d.dim)
    p.add_argument("--window", type=int, default=d.window)
    p.add_argument("--negatives", type=int, default=d.negatives)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr)

    p = add("synth", cmd_synth, "write a synthetic labelled dataset")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--n-pos", type=int, default=400)
    p.add_argument("--n-neg", type=int, default=400)
    p.add_argument("--noise-blocks", type=int, default=8)

    p = add("train", cmd_train, "two-stage training")
    _data_args(p, split=False)
    p.set_defaults(split="train")
    p.add_argument("-o", "--output", required=True, help="checkpoint path")
    p.add_argument("--tables")
    p.add_argument("--log", help="write per-epoch losses as JSON")

    p = add("eval", cmd_eval, "metrics of a checkpoint on a labelled dataset")
    p.add_argument("model")
    _data_args(p)
    p.add_argument("--threshold", type=float)

    p = add("predict", cmd_predict, "classify one contract")
    p.add_argument("model")
    p.add_argument("file")
    p.add_argument("--strip-metadata", action="store_true")

    p = add("dump-features", cmd_dump_features, "per-node and per-graph features as JSON lines")
    p.add_argument("model")
    _data_args(p)
    p.add_argument("-o", "--output", required=True)

    p = add("report", cmd_report, "evaluate checkpoints and write a JSON report")
    _data_args(p)
    p.add_argument("-m", "--model", action="append", required=True, help="repeat per class")
    p.add_argument("-o", "--output", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"evmhunt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, HexFormatError) as exc:
        print(f"evmhunt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"evmhunt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
