"""Command-line entry point: ``python3 -m regionprompt <command> ...``.

Exit codes: 0 success, 1 a check failed (gradcheck), 2 configuration error,
3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import geometry, harness, synthdata, trainer
from .encoder import read_class_embeddings
from .errors import ConfigError, DataError
from .losses import BG_MODES
from .prompt import read_token_table, write_token_table

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def _config(args) -> trainer.TrainConfig:
    return trainer.load_config(args.config, args.set)


def _load_data(args):
    return geometry.read_proposals(args.data), read_token_table(args.tokens)


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_synth(args) -> int:
    cfg = _config(args)
    enc = trainer.make_encoder(cfg)
    world, table, records = synthdata.gen_benchmark(
        args.n_base, args.n_novel, cfg.d_w, cfg.d_e, args.per_class, synthdata.DEFAULT_LEVELS,
        args.n_neg, args.sigma0, args.slope, args.rho, args.seed, args.bridge, enc,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    geometry.write_proposals(out / "proposals.jsonl", records)
    write_token_table(out / "tokens.txt", table)
    print(f"wrote {len(records)} records and {len(table)} class tokens to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    records, table = _load_data(args)
    result = trainer.train_all(records, cfg, trainer.make_encoder(cfg), table)
    trainer.save_run(args.out, result)
    for g in result.groups:
        print(f"group\t[{g.lo:.2f},{g.hi:.2f}]\tloss {g.initial_loss:.6f} -> {g.final_loss:.6f}"
              f"\t{g.steps} steps\t{g.n_pos} pos\t{g.n_neg} neg")
    print(f"config_hash\t{cfg.hash_hex()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    records, table = _load_data(args)
    if args.embeddings:
        ids, splits, emb = read_class_embeddings(args.embeddings)
        cfg = _config(args)
        report = harness.evaluate_embeddings(records, ids, splits, emb, cfg.tau, cfg.iou_threshold,
                                             cfg.hash_hex(), (cfg.init_seed, cfg.data_seed, cfg.encoder_seed))
    elif args.checkpoint:
        result = trainer.load_run(args.checkpoint, table)
        report = harness.evaluate(records, result, trainer.make_encoder(result.config), table)
    else:
        cfg = _config(args)
        report = harness.evaluate(records, harness.untrained_context(cfg), trainer.make_encoder(cfg), table, cfg)
    _emit(report.text(), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    reports = trainer.gradcheck(cfg, args.seed, args.instances, args.modes)
    limit = args.tolerance if args.tolerance is not None else (1e-4 if cfg.tau < 0.05 else 1e-5)
    ok = True
    for mode, reps in reports.items():
        worst = max(r.max_rel_error for r in reps)
        blocks = ",".join(reps[0].analytic)
        status = "ok" if worst <= limit else "FAIL"
        ok &= worst <= limit
        print(f"max_rel_error\t{mode}\t{worst:.3e}\t{blocks}\t{status}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_export(args) -> int:
    table = read_token_table(args.tokens)
    result = trainer.load_run(args.checkpoint, table)
    subset = {"all": table.ids, "base": table.base_ids, "novel": table.novel_ids}[args.subset]
    enc = trainer.make_encoder(result.config)
    harness.export_embeddings(result.context, enc, table, subset, args.out, result.config.token_position)
    print(f"wrote {len(subset)} class embeddings to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    records, table = _load_data(args)
    tables = [t.strip() for t in args.tables.split(",") if t.strip()]
    rows = harness.ablate(records, table, trainer.make_encoder(cfg), cfg, tables)
    lines = [harness.ABLATION_HEADER] + [r.line() for r in rows]
    if "8" in tables:
        lines.append(f"# position separation (min pairwise |dE|): {harness.position_separation(rows):.6g}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="regionprompt", description="Prompt-context learning for region classification.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a planted synthetic benchmark")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-base", type=int, default=20)
    s.add_argument("--n-novel", type=int, default=10)
    s.add_argument("--per-class", type=int, default=50)
    s.add_argument("--n-neg", type=int, default=1000)
    s.add_argument("--sigma0", type=float, default=0.1)
    s.add_argument("--slope", type=float, default=2.0)
    s.add_argument("--rho", type=float, default=0.2)
    s.add_argument("--bridge", choices=synthdata.BRIDGES, default="context")
    s.set_defaults(func=cmd_synth)

    def data_args(q):
        q.add_argument("--data", required=True, help="proposal JSONL file")
        q.add_argument("--tokens", required=True, help="class-token table")

    t = sub.add_parser("train", parents=[common], help="train grouped contexts and write a checkpoint")
    data_args(t)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="proposal classification accuracy")
    data_args(e)
    src = e.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--embeddings", help="external class-embedding table (bypasses the encoder)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--modes", nargs="+", choices=BG_MODES, default=list(BG_MODES))
    g.add_argument("--tolerance", type=float)
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export", parents=[common], help="write class embeddings of a checkpoint")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--tokens", required=True)
    x.add_argument("--subset", choices=("all", "base", "novel"), default="all")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)

    a = sub.add_parser("ablate", parents=[common], help="run configuration sweeps")
    data_args(a)
    a.add_argument("--tables", default="3,4,5,6,7,8", help="comma-separated sweep ids")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
